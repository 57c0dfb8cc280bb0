use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::tape::{BackwardRule, Tape, Var};
use crate::tensor::Tensor;

/// `ef * a + df * (1 - a)` with `a = sigmoid(alpha_logit)`, clamped entrywise to
/// `[min(ef, df), max(ef, df)]` so rounding never leaves the convex hull.
pub fn af_fuse_forward(ef: &Tensor, df: &Tensor, alpha_logit: f64) -> Result<Tensor> {
    if ef.shape() != df.shape() {
        return Err(Error::shape(format!(
            "adaptive fusion of {} with {}",
            ef.shape(),
            df.shape()
        )));
    }
    let a = sigmoid(alpha_logit);
    let b = 1.0 - a;
    let mut out = ef.clone();
    for (o, &d) in out.data_mut().iter_mut().zip(df.data()) {
        let e = *o;
        *o = (e * a + d * b).clamp(e.min(d), e.max(d));
    }
    Ok(out)
}

struct AfRule;

impl BackwardRule for AfRule {
    fn name(&self) -> &'static str {
        "af_fuse"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (ef, df, logit) = (inputs[0], inputs[1], inputs[2]);
        let a = sigmoid(logit.item());
        let b = 1.0 - a;
        let g_ef = needs[0].then(|| grad.map(|g| g * a));
        let g_df = needs[1].then(|| grad.map(|g| g * b));
        let g_logit = needs[2].then(|| {
            let dot: f64 = grad
                .data()
                .iter()
                .zip(ef.data().iter().zip(df.data()))
                .map(|(g, (e, d))| g * (e - d))
                .sum();
            Tensor::scalar(dot * a * b)
        });
        Ok(vec![g_ef, g_df, g_logit])
    }
}

pub fn af_fuse(tape: &mut Tape, ef: Var, df: Var, alpha_logit: Var) -> Result<Var> {
    let logit = tape.value(alpha_logit);
    if logit.len() != 1 {
        return Err(Error::shape(format!(
            "fusion weight must be a scalar, got {}",
            logit.shape()
        )));
    }
    let out = af_fuse_forward(tape.value(ef), tape.value(df), logit.item())?;
    Ok(tape.push(out, &[ef, df, alpha_logit], AfRule))
}
