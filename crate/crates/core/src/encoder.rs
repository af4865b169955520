//! Miniature large-kernel convolutional backbone mapping a camera view to
//! a feature map.
//!
//! Each stage halves the spatial extent with a 2×2 stride-2 convolution and
//! then applies residual blocks `x + relu(pw(dw(x)))`, where `dw` is a
//! depthwise `k×k` convolution and `pw` a pointwise one.

use serde::{Deserialize, Serialize};

use crate::image::RgbImage;
use crate::nn::Builder;
use crate::params::ParamStore;
use crate::scenes::Camera;
use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

pub const NUM_VIEWS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_size: usize,
    /// `(channels, blocks)` per stage.
    pub stages: Vec<(usize, usize)>,
    pub large_kernel: usize,
    pub frozen: bool,
    /// Accept a single view instead of the six-camera set.
    pub single_view: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stages: vec![(16, 1), (32, 1), (64, 2)],
            large_kernel: 7,
            frozen: true,
            single_view: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.stages.is_empty() {
            return Err("encoder needs at least one stage".into());
        }
        if self.stages.len() >= usize::BITS as usize || self.input_size == 0 {
            return Err("bad encoder input size".into());
        }
        let factor = 1usize << self.stages.len();
        if self.input_size % factor != 0 {
            return Err(format!(
                "input_size {} not divisible by 2^{}",
                self.input_size,
                self.stages.len()
            ));
        }
        if self.large_kernel % 2 == 0 {
            return Err(format!("large_kernel {} must be odd", self.large_kernel));
        }
        if self.stages.iter().any(|&(c, _)| c == 0) {
            return Err("stage channels must be positive".into());
        }
        if self.stages.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err("stage channels must be nondecreasing".into());
        }
        Ok(())
    }

    /// Shape `(c, h, w)` of the final feature map.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let side = self.input_size >> self.stages.len();
        (self.stages.last().map_or(0, |s| s.0), side, side)
    }

    pub fn num_views(&self) -> usize {
        if self.single_view {
            1
        } else {
            NUM_VIEWS
        }
    }
}

/// Encoder output for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Scalar = f32> {
    pub values: Tensor<T>,
    pub view: Camera,
}

fn stage_prefix(s: usize) -> String {
    format!("encoder.stage{s}")
}

/// Adds all encoder parameters: Kaiming-uniform kernels, zero biases.
pub fn init_params(b: &mut Builder<'_>, cfg: &EncoderConfig) {
    let mut cin = 3;
    let k = cfg.large_kernel;
    for (s, &(c, blocks)) in cfg.stages.iter().enumerate() {
        let p = stage_prefix(s);
        let w = b.init.kaiming(&[c, cin, 2, 2], cin * 4);
        b.put(format!("{p}.down.w"), w);
        b.put(format!("{p}.down.b"), Tensor::zeros(&[c]));
        for blk in 0..blocks {
            let w = b.init.kaiming(&[c, 1, k, k], k * k);
            b.put(format!("{p}.block{blk}.dw.w"), w);
            b.put(format!("{p}.block{blk}.dw.b"), Tensor::zeros(&[c]));
            let w = b.init.kaiming(&[c, c, 1, 1], c);
            b.put(format!("{p}.block{blk}.pw.w"), w);
            b.put(format!("{p}.block{blk}.pw.b"), Tensor::zeros(&[c]));
        }
        cin = c;
    }
}

/// Residual large-kernel block under `prefix` (`.dw.*`, `.pw.*`).
pub fn lk_block<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let dw = tape.param(store, &format!("{prefix}.dw.w"))?;
    let dwb = tape.param(store, &format!("{prefix}.dw.b"))?;
    let pw = tape.param(store, &format!("{prefix}.pw.w"))?;
    let pwb = tape.param(store, &format!("{prefix}.pw.b"))?;
    let c = tape.shape(dw)[0];
    if tape.shape(x)[0] != c {
        return Err(TensorError::Dimension {
            op: "lk_block",
            detail: format!("input has {} channels, block has {c}", tape.shape(x)[0]),
        });
    }
    let pad = (tape.shape(dw)[2] - 1) / 2;
    let y = tape.depthwise_conv2d(x, dw, pad)?;
    let y = tape.channel_bias(y, dwb)?;
    let y = tape.conv2d(y, pw, 1, 0)?;
    let y = tape.channel_bias(y, pwb)?;
    let y = tape.relu(y)?;
    tape.add(x, y)
}

/// Encodes a `3×H×W` image variable into the final-stage feature map.
pub fn encode_view<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, cfg: &EncoderConfig, image: Var) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    if s != [3, cfg.input_size, cfg.input_size] {
        return Err(TensorError::Dimension {
            op: "encode_view",
            detail: format!("image {s:?}, expected [3, {n}, {n}]", n = cfg.input_size),
        });
    }
    let mut x = image;
    for (si, &(_, blocks)) in cfg.stages.iter().enumerate() {
        let p = stage_prefix(si);
        let w = tape.param(store, &format!("{p}.down.w"))?;
        let b = tape.param(store, &format!("{p}.down.b"))?;
        x = tape.conv2d(x, w, 2, 0)?;
        x = tape.channel_bias(x, b)?;
        for blk in 0..blocks {
            x = lk_block(tape, store, &format!("{p}.block{blk}"), x)?;
        }
    }
    Ok(x)
}

/// Encodes every view of a sample in canonical order.
pub fn encode_views<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    views: &[Var],
) -> Result<Vec<Var>> {
    check_view_count(cfg, views.len())?;
    views.iter().map(|&v| encode_view(tape, store, cfg, v)).collect()
}

pub fn check_view_count(cfg: &EncoderConfig, n: usize) -> Result<()> {
    if n != cfg.num_views() {
        return Err(TensorError::Input {
            op: "encode_views",
            detail: format!("got {n} views, expected {}", cfg.num_views()),
        });
    }
    Ok(())
}

/// Runs the encoder outside any training tape, e.g. to cache features of
/// a frozen backbone.
pub fn encode_images<T: Scalar>(store: &ParamStore<T>, cfg: &EncoderConfig, images: &[RgbImage]) -> Result<Vec<FeatureMap<T>>> {
    check_view_count(cfg, images.len())?;
    let cams: Vec<Camera> = if cfg.single_view {
        vec![Camera::Front]
    } else {
        Camera::ALL.to_vec()
    };
    images
        .iter()
        .zip(cams)
        .map(|(img, view)| {
            let mut tape = Tape::without_param_grads();
            let x = tape.constant(img.to_tensor());
            let f = encode_view(&mut tape, store, cfg, x)?;
            Ok(FeatureMap {
                values: tape.value(f).clone(),
                view,
            })
        })
        .collect()
}
