//! Held-out evaluation: full-image forward passes in eval mode.

use serde::{Deserialize, Serialize};

use super::synth::Sample;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Scores};
use crate::network::{forward, ForwardCtx, NetworkConfig};
use crate::nn::{cross_entropy_forward, Mode};
use crate::par;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub class: usize,
    pub iou: f64,
    pub f1: f64,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean pixel cross-entropy of the main head on the evaluated images.
    pub loss: f64,
    pub oa: f64,
    pub miou: f64,
    pub mean_f1: f64,
    pub per_class: Vec<ClassRecord>,
    pub config_digest: String,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub loss: f64,
    pub scores: Scores,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn record(&self, step: usize, config_digest: &str) -> MetricsRecord {
        MetricsRecord {
            step,
            loss: self.loss,
            oa: self.scores.oa,
            miou: self.scores.miou,
            mean_f1: self.scores.mean_f1,
            per_class: self
                .scores
                .per_class
                .iter()
                .map(|c| ClassRecord {
                    class: c.class,
                    iou: c.iou,
                    f1: c.f1,
                })
                .collect(),
            config_digest: config_digest.to_string(),
        }
    }
}

/// Stacks images into one `(n, 3, s, s)` tensor and concatenates their labels.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::shape("cannot stack zero samples"))?
        .image
        .shape();
    let mut data = Vec::with_capacity(first.numel() * samples.len());
    let mut labels = Vec::with_capacity(first.plane() * samples.len());
    for s in samples {
        if s.image.shape() != first {
            return Err(Error::shape(format!(
                "mixed image shapes {} and {}",
                first,
                s.image.shape()
            )));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.labels);
    }
    let shape = Shape {
        n: samples.len(),
        ..first
    };
    Ok((Tensor::from_vec(shape, data)?, labels))
}

/// Per-pixel argmax over classes; ties go to the lower class id.
pub fn predict(logits: &Tensor) -> Vec<u8> {
    let s = logits.shape();
    let plane = s.plane();
    let d = logits.data();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for i in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if d[(n * s.c + c) * plane + i] > d[(n * s.c + best) * plane + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Eval-mode logits of the main head.
pub fn infer(
    params: &ParamStore,
    buffers: &ParamStore,
    config: &NetworkConfig,
    images: Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let x = tape.constant(images);
    let mut ctx = ForwardCtx::new(&vars, buffers, Mode::Eval);
    let out = forward(&mut tape, x, config, &mut ctx)?;
    Ok(tape.value(out.logits).clone())
}

/// Confusion matrix and mean main-head loss over `samples`. Batches may run on
/// worker threads; partial results are merged in batch order.
pub fn evaluate(
    params: &ParamStore,
    buffers: &ParamStore,
    config: &NetworkConfig,
    samples: &[Sample],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::DegenerateMetrics);
    }
    let batches: Vec<&[Sample]> = samples.chunks(EVAL_BATCH).collect();
    let parts = par::map_indices(
        batches.len(),
        |b| -> Result<(f64, usize, ConfusionMatrix)> {
            let refs: Vec<&Sample> = batches[b].iter().collect();
            let (images, labels) = stack(&refs)?;
            let logits = infer(params, buffers, config, images)?;
            let loss = cross_entropy_forward(&logits, &labels)?;
            let mut cm = ConfusionMatrix::new(config.num_classes);
            cm.accumulate(&predict(&logits), &labels)?;
            let valid = labels
                .iter()
                .filter(|&&l| l != crate::nn::IGNORE_LABEL)
                .count();
            Ok((loss, valid, cm))
        },
    );
    let mut confusion = ConfusionMatrix::new(config.num_classes);
    let (mut loss_sum, mut pixels) = (0.0, 0usize);
    for part in parts {
        let (loss, valid, cm) = part?;
        loss_sum += loss * valid as f64;
        pixels += valid;
        confusion.merge(&cm)?;
    }
    Ok(EvalReport {
        loss: loss_sum / pixels as f64,
        scores: confusion.scores()?,
        confusion,
    })
}
