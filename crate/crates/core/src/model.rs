//! The assembled pipeline: encoder → mixture of experts → adapter → LM.

use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterConfig};
use crate::encoder::{self, EncoderConfig, FeatureMap};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::lm::{self, LMConfig, MemoryDecoder, Vocabulary};
use crate::moe::{self, MoEConfig, MoEShapes};
use crate::nn::Builder;
use crate::params::{Init, ParamStore};
use crate::tensor::{self, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub moe: MoEConfig,
    pub adapter: AdapterConfig,
    pub lm: LMConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate().map_err(Error::Config)?;
        self.moe.validate(self.encoder.feature_shape()).map_err(Error::Config)?;
        self.lm.validate().map_err(Error::Config)?;
        self.adapter.validate(self.lm.dim).map_err(Error::Config)?;
        if self.moe.proj_dim != self.lm.dim {
            return Err(Error::Config(format!(
                "moe.proj_dim {} must equal lm.dim {}",
                self.moe.proj_dim, self.lm.dim
            )));
        }
        Ok(())
    }

    pub fn moe_shapes(&self) -> MoEShapes {
        self.moe.shapes(self.encoder.feature_shape())
    }

    /// Visual tokens fed to the LM per sample.
    pub fn visual_tokens(&self) -> usize {
        self.encoder.num_views() * self.moe.expert_out_channels
    }

    /// Tiny configuration used for gradient certification.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                input_size: 8,
                stages: vec![(4, 1), (8, 1)],
                large_kernel: 3,
                frozen: false,
                single_view: false,
            },
            moe: MoEConfig {
                num_experts: 2,
                expert_out_channels: 4,
                gate_hidden: 2,
                proj_dim: 16,
                ..MoEConfig::default()
            },
            adapter: AdapterConfig {
                heads: 2,
                zero_init_out: false,
            },
            lm: LMConfig {
                dim: 16,
                enc_layers: 1,
                dec_layers: 1,
                heads: 2,
                ffn_dim: 24,
                max_text_len: 12,
                max_answer_len: 8,
                vocab_size: 0,
            },
        }
    }
}

/// Adds every parameter of the pipeline in a fixed order. Encoder
/// parameters are non-trainable when the encoder is frozen.
pub fn init_params(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let mut b = Builder {
        store: &mut store,
        init: &mut init,
        trainable: !cfg.encoder.frozen,
    };
    encoder::init_params(&mut b, &cfg.encoder);
    b.trainable = true;
    moe::init_params(&mut b, &cfg.moe, &cfg.moe_shapes());
    adapter::init_params(&mut b, &cfg.adapter, cfg.lm.dim);
    lm::init_params(&mut b, &cfg.lm, vocab_size);
    store
}

/// What the visual branch starts from: cached features of a frozen
/// encoder, or raw images when the encoder runs on the tape.
#[derive(Clone, Debug)]
pub enum VisualInput<T: Scalar = f32> {
    Features(Vec<Tensor<T>>),
    Images(Vec<Tensor<T>>),
}

impl<T: Scalar> VisualInput<T> {
    pub fn cast<U: Scalar>(&self) -> VisualInput<U> {
        match self {
            VisualInput::Features(v) => VisualInput::Features(v.iter().map(Tensor::cast).collect()),
            VisualInput::Images(v) => VisualInput::Images(v.iter().map(Tensor::cast).collect()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VisualInput::Features(v) | VisualInput::Images(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Instruction-independent visual tokens `V` (`views·c' × dim`).
pub fn visual_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    input: &VisualInput<T>,
) -> tensor::Result<Var> {
    let (vars, images) = match input {
        VisualInput::Features(f) => (f, false),
        VisualInput::Images(i) => (i, true),
    };
    let vars: Vec<Var> = vars.iter().map(|t| tape.constant(t.clone())).collect();
    visual_tokens_from(tape, store, cfg, &vars, images)
}

/// As [`visual_tokens`], starting from tape variables holding either
/// images (`images = true`) or encoder feature maps.
pub fn visual_tokens_from<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    views: &[Var],
    images: bool,
) -> tensor::Result<Var> {
    encoder::check_view_count(&cfg.encoder, views.len())?;
    let feats = if images {
        encoder::encode_views(tape, store, &cfg.encoder, views)?
    } else {
        views.to_vec()
    };
    moe::moe_pipeline(tape, store, &cfg.moe, &feats)
}

/// Outputs of one pipeline pass.
pub struct Forward {
    pub v: Var,
    pub t: Var,
    pub v_input: Var,
    pub logits: Var,
    pub loss: Var,
}

/// Full teacher-forced pass for one sample.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    input: &VisualInput<T>,
    question: &[usize],
    target: &[usize],
) -> tensor::Result<Forward> {
    let v = visual_tokens(tape, store, cfg, input)?;
    forward_tokens(tape, store, cfg, v, question, target)
}

/// Teacher-forced pass from already computed visual tokens.
pub fn forward_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    v: Var,
    question: &[usize],
    target: &[usize],
) -> tensor::Result<Forward> {
    let t = lm::embed_text(tape, store, &cfg.lm, question)?;
    let keep = lm::text_keep(question);
    let v_input = adapter::adapt(tape, store, &cfg.adapter, v, t, Some(&keep))?;
    let (logits, loss) = lm::lm_forward(tape, store, &cfg.lm, v_input, t, &keep, target)?;
    Ok(Forward {
        v,
        t,
        v_input,
        logits,
        loss,
    })
}

/// Trained or initialised model with its vocabulary.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new(cfg: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, vocab.len(), seed);
        Ok(Self { cfg, vocab, params })
    }

    /// Images to the visual input the training tape starts from.
    pub fn prepare_visual(&self, images: &[RgbImage]) -> Result<VisualInput<f32>> {
        if self.cfg.encoder.frozen {
            let maps = encoder::encode_images(&self.params, &self.cfg.encoder, images)?;
            Ok(VisualInput::Features(maps.into_iter().map(|m: FeatureMap| m.values).collect()))
        } else {
            encoder::check_view_count(&self.cfg.encoder, images.len())?;
            Ok(VisualInput::Images(images.iter().map(RgbImage::to_tensor).collect()))
        }
    }

    pub fn question_ids(&self, question: &str) -> Vec<usize> {
        self.vocab.tokenize(question, self.cfg.lm.max_text_len)
    }

    pub fn target_ids(&self, answer: &str) -> Vec<usize> {
        let ids = self.vocab.tokenize(answer, usize::MAX);
        lm::target_sequence(&ids, &self.cfg.lm)
    }

    /// Greedy answer ids (without `bos`/`eos`).
    pub fn generate(&self, input: &VisualInput<f32>, question: &[usize]) -> Result<Vec<usize>> {
        let mut tape = Tape::without_param_grads();
        let v = visual_tokens(&mut tape, &self.params, &self.cfg, input)?;
        let t = lm::embed_text(&mut tape, &self.params, &self.cfg.lm, question)?;
        let keep = lm::text_keep(question);
        let v_input = adapter::adapt(&mut tape, &self.params, &self.cfg.adapter, v, t, Some(&keep))?;
        let (memory, keep) = lm::encode(&mut tape, &self.params, &self.cfg.lm, v_input, t, &keep)?;
        let mut dec = MemoryDecoder {
            store: &self.params,
            cfg: &self.cfg.lm,
            memory: tape.value(memory).clone(),
            keep,
        };
        Ok(lm::greedy_decode(&mut dec, self.cfg.lm.max_answer_len - 1)?)
    }

    pub fn answer(&self, images: &[RgbImage], question: &str) -> Result<String> {
        let input = self.prepare_visual(images)?;
        let ids = self.generate(&input, &self.question_ids(question))?;
        Ok(self.vocab.detokenize(&ids))
    }
}
