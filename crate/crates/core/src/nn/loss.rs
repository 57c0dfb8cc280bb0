use crate::error::{Error, Result};
use crate::tape::{BackwardRule, Tape, Var};
use crate::tensor::Tensor;

pub const IGNORE_LABEL: u8 = 255;

/// Checks `labels` against `(n, classes, h, w)` logits; returns the non-ignored count.
fn validate(logits: &Tensor, labels: &[u8]) -> Result<usize> {
    let s = logits.shape();
    if labels.len() != s.n * s.plane() {
        return Err(Error::shape(format!(
            "{} labels for logits {s}",
            labels.len()
        )));
    }
    let mut valid = 0;
    for &l in labels {
        if l == IGNORE_LABEL {
            continue;
        }
        if l as usize >= s.c {
            return Err(Error::Label {
                label: l,
                classes: s.c,
            });
        }
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::DegenerateLoss);
    }
    Ok(valid)
}

/// Per-pixel `(log-sum-exp, max)` over the class axis.
fn pixel_lse(logits: &Tensor, n: usize, i: usize) -> f64 {
    let s = logits.shape();
    let plane = s.plane();
    let d = logits.data();
    let at = |c: usize| d[(n * s.c + c) * plane + i];
    let max = (0..s.c).map(at).fold(f64::NEG_INFINITY, f64::max);
    max + (0..s.c).map(|c| (at(c) - max).exp()).sum::<f64>().ln()
}

pub fn cross_entropy_forward(logits: &Tensor, labels: &[u8]) -> Result<f64> {
    let valid = validate(logits, labels)?;
    let s = logits.shape();
    let plane = s.plane();
    let mut total = 0.0;
    for n in 0..s.n {
        for i in 0..plane {
            let l = labels[n * plane + i];
            if l == IGNORE_LABEL {
                continue;
            }
            total += pixel_lse(logits, n, i) - logits.data()[(n * s.c + l as usize) * plane + i];
        }
    }
    Ok(total / valid as f64)
}

struct CrossEntropyRule {
    labels: Vec<u8>,
    valid: usize,
}

impl BackwardRule for CrossEntropyRule {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let logits = inputs[0];
        let s = logits.shape();
        let plane = s.plane();
        let scale = grad.item() / self.valid as f64;
        let mut gx = Tensor::zeros(s);
        let ld = logits.data();
        let gd = gx.data_mut();
        for n in 0..s.n {
            for i in 0..plane {
                let l = self.labels[n * plane + i];
                if l == IGNORE_LABEL {
                    continue;
                }
                let lse = pixel_lse(logits, n, i);
                for c in 0..s.c {
                    let idx = (n * s.c + c) * plane + i;
                    let p = (ld[idx] - lse).exp();
                    let target = if c == l as usize { 1.0 } else { 0.0 };
                    gd[idx] = scale * (p - target);
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Mean pixel cross-entropy over non-ignored pixels. `labels` is `n * h * w`
/// class ids in row-major order, 255 meaning "ignore".
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let value = cross_entropy_forward(tape.value(logits), labels)?;
    let valid = validate(tape.value(logits), labels)?;
    Ok(tape.push(
        Tensor::scalar(value),
        &[logits],
        CrossEntropyRule {
            labels: labels.to_vec(),
            valid,
        },
    ))
}
