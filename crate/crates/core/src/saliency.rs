//! Gradient saliency: `|∂ log p(answer) / ∂ pixel|`, maximised over colour
//! channels and min-max normalised per view.

use std::path::Path;

use serde::Serialize;

use crate::error::{io_at, Result};
use crate::image::{write_pgm, RgbImage};
use crate::lm::vocab::PAD;
use crate::model::{forward_tokens, visual_tokens_from, Model};
use crate::scenes::Camera;
use crate::tensor::Tape;

#[derive(Clone, Debug)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, in `[0,1]`.
    pub values: Vec<f32>,
    /// Sum of the raw channel-maxed magnitudes before normalisation.
    pub total: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SaliencySummary {
    pub answer: String,
    pub referenced_view: Option<String>,
    /// Raw total saliency per view, canonical camera order.
    pub totals: Vec<(String, f64)>,
    /// Whether the referenced view has the largest total (diagnostic only).
    pub referenced_is_max: Option<bool>,
}

/// Min-max normalisation; a constant map becomes all zeros.
pub fn normalize(raw: &[f32]) -> Vec<f32> {
    let lo = raw.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Saliency of the model's own greedy answer. Returns the answer and one
/// map per view.
pub fn saliency(model: &Model, images: &[RgbImage], question: &str) -> Result<(String, Vec<SaliencyMap>)> {
    let answer = model.answer(images, question)?;
    let q = model.question_ids(question);
    let target = model.target_ids(&answer);
    let tokens = target[1..].iter().filter(|&&t| t != PAD).count() as f32;

    let mut tape = Tape::without_param_grads();
    let views: Vec<_> = images.iter().map(|im| tape.leaf(im.to_tensor(), true)).collect();
    let v = visual_tokens_from(&mut tape, &model.params, &model.cfg, &views, true)?;
    let out = forward_tokens(&mut tape, &model.params, &model.cfg, v, &q, &target)?;
    tape.backward(out.loss)?;

    let mut maps = Vec::with_capacity(images.len());
    for (im, var) in images.iter().zip(&views) {
        let (w, h) = (im.width, im.height);
        let g = tape.grad(*var).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; 3 * w * h]);
        // log p = -tokens · mean loss
        let raw: Vec<f32> = (0..w * h)
            .map(|i| (0..3).map(|c| (g[c * w * h + i] * tokens).abs()).fold(0.0, f32::max))
            .collect();
        maps.push(SaliencyMap {
            width: w,
            height: h,
            total: raw.iter().map(|&v| v as f64).sum(),
            values: normalize(&raw),
        });
    }
    Ok((answer, maps))
}

pub fn summarize(question: &str, answer: &str, maps: &[SaliencyMap]) -> SaliencySummary {
    let totals: Vec<(String, f64)> = Camera::ALL
        .iter()
        .zip(maps)
        .map(|(c, m)| (c.key().to_string(), m.total))
        .collect();
    let referenced = Camera::referenced_by(question);
    let referenced_is_max = referenced.map(|c| {
        let t = maps[c.index()].total;
        maps.iter().all(|m| m.total <= t)
    });
    SaliencySummary {
        answer: answer.to_string(),
        referenced_view: referenced.map(|c| c.key().to_string()),
        totals,
        referenced_is_max,
    }
}

/// Writes `<CAM_KEY>.pgm` per view into `dir`.
pub fn write_maps(dir: &Path, maps: &[SaliencyMap]) -> Result<()> {
    for (c, m) in Camera::ALL.iter().zip(maps) {
        let gray: Vec<u8> = m.values.iter().map(|&v| (v * 255.0).round() as u8).collect();
        let path = dir.join(format!("{}.pgm", c.key()));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io_at(&path))?);
        write_pgm(&mut f, m.width, m.height, &gray).map_err(io_at(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_bounds() {
        let n = normalize(&[2.0, 4.0, 3.0]);
        assert_eq!(n, vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize(&[1.5; 4]), vec![0.0; 4]);
    }
}
