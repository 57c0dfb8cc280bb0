//! Top-k sparse attention along the channel axis.
//!
//! Tokens are channels: each head compares its `c_hat = C / heads` channel
//! descriptors (length `h * w`) pairwise, keeps only the `k` largest scores per
//! row, and renormalizes over the survivors. Heads use different keep ratios.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec};
use crate::ops;
use crate::params::{Initializer, ParamVars};
use crate::tape::{BackwardRule, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Exact rational keep ratio `num / den` in (0, 1].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct KeepRatio {
    pub num: usize,
    pub den: usize,
}

impl KeepRatio {
    pub const fn new(num: usize, den: usize) -> Self {
        KeepRatio { num, den }
    }

    /// `max(1, ceil(ratio * c_hat))`, computed in integers.
    pub fn keep(&self, c_hat: usize) -> usize {
        (self.num * c_hat).div_ceil(self.den).max(1)
    }

    pub fn is_valid(&self) -> bool {
        self.den > 0 && self.num > 0 && self.num <= self.den
    }
}

impl FromStr for KeepRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::config(format!("keep ratio `{s}` is not `num/den` in (0, 1]"));
        let r = match s.split_once('/') {
            Some((n, d)) => KeepRatio::new(
                n.trim().parse().map_err(|_| bad())?,
                d.trim().parse().map_err(|_| bad())?,
            ),
            None => KeepRatio::new(s.parse().map_err(|_| bad())?, 1),
        };
        if r.is_valid() {
            Ok(r)
        } else {
            Err(bad())
        }
    }
}

impl fmt::Display for KeepRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct TksaConfig {
    pub channels: usize,
    pub heads: usize,
    /// One keep ratio per head.
    pub k_ratios: Vec<KeepRatio>,
    /// Threshold symbol of the sparse-attention formula; carried for
    /// completeness, not used in the computation.
    pub lambda: f64,
}

impl TksaConfig {
    pub fn new(channels: usize) -> Self {
        TksaConfig {
            channels,
            heads: 4,
            k_ratios: vec![
                KeepRatio::new(1, 2),
                KeepRatio::new(2, 3),
                KeepRatio::new(3, 4),
                KeepRatio::new(4, 5),
            ],
            lambda: 0.0,
        }
    }

    /// Every head keeps all of its columns.
    pub fn dense(channels: usize, heads: usize) -> Self {
        TksaConfig {
            channels,
            heads,
            k_ratios: vec![KeepRatio::new(1, 1); heads],
            lambda: 0.0,
        }
    }

    pub fn head_channels(&self) -> usize {
        self.channels / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "{} channels are not divisible into {} heads",
                self.channels, self.heads
            )));
        }
        if self.head_channels() < 2 {
            return Err(Error::config(format!(
                "each head needs at least 2 channels, got {}",
                self.head_channels()
            )));
        }
        if self.k_ratios.len() != self.heads {
            return Err(Error::config(format!(
                "{} keep ratios for {} heads",
                self.k_ratios.len(),
                self.heads
            )));
        }
        if let Some(r) = self.k_ratios.iter().find(|r| !r.is_valid()) {
            return Err(Error::config(format!("keep ratio {r} outside (0, 1]")));
        }
        Ok(())
    }

    /// Survivors per row for each head.
    pub fn keep_counts(&self) -> Vec<usize> {
        let c_hat = self.head_channels();
        self.k_ratios.iter().map(|r| r.keep(c_hat)).collect()
    }

    pub fn qkv_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.channels, 3 * self.channels, true)
    }

    pub fn qkv_dw_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(3 * self.channels, 3, 1, true)
    }

    pub fn out_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.channels, self.channels, true)
    }

    pub fn param_count(&self) -> usize {
        self.qkv_spec().param_count()
            + self.qkv_dw_spec().param_count()
            + self.out_spec().param_count()
            + self.heads
    }
}

/// Column indices kept in one row: the `k` largest values, ties resolved
/// toward the lower index. A value's rank is the number of entries that beat
/// it; it survives when its rank is below `k`.
pub fn topk_row(row: &[f64], k: usize) -> Vec<usize> {
    (0..row.len())
        .filter(|&j| {
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(i, &v)| v > row[j] || (v == row[j] && i < j))
                .count();
            rank < k
        })
        .collect()
}

/// Masks each row of every `(batch, head)` slice of `scores`, keeping `ks[head]`
/// entries and replacing the rest with `-inf`. Returns the masked tensor, the
/// keep mask, and the smallest gap between a survivor and a rejected value.
pub fn topk_mask_forward(scores: &Tensor, ks: &[usize]) -> Result<(Tensor, Vec<bool>, f64)> {
    let s = scores.shape();
    if ks.len() != s.c {
        return Err(Error::config(format!(
            "{} keep counts for {} heads",
            ks.len(),
            s.c
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > s.w) {
        return Err(Error::config(format!(
            "top-k with k = {k} on rows of length {}",
            s.w
        )));
    }
    let mut out = Tensor::full(s, f64::NEG_INFINITY);
    let mut keep = vec![false; s.numel()];
    let mut margin = f64::INFINITY;
    let src = scores.data();
    let dst = out.data_mut();
    for n in 0..s.n {
        for (head, &k) in ks.iter().enumerate() {
            for r in 0..s.h {
                let base = s.offset(n, head, r, 0);
                let row = &src[base..base + s.w];
                let kept = topk_row(row, k);
                let mut lowest_kept = f64::INFINITY;
                for &j in &kept {
                    dst[base + j] = row[j];
                    keep[base + j] = true;
                    lowest_kept = lowest_kept.min(row[j]);
                }
                let best_dropped = (0..s.w)
                    .filter(|j| !keep[base + j])
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                margin = margin.min(lowest_kept - best_dropped);
            }
        }
    }
    Ok((out, keep, margin))
}

/// Single-matrix form: `scores` is one `c_hat x c_hat` score matrix.
pub fn topk_mask_matrix(scores: &Tensor, k: usize) -> Result<Tensor> {
    let s = scores.shape();
    let m = scores.reshaped(Shape::new(1, 1, s.n * s.c * s.h, s.w)?)?;
    let (out, _, _) = topk_mask_forward(&m, &[k])?;
    out.reshaped(s)
}

struct TopkRule {
    keep: Vec<bool>,
}

impl BackwardRule for TopkRule {
    fn name(&self) -> &'static str {
        "topk_mask"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut g = grad.clone();
        for (gi, &k) in g.data_mut().iter_mut().zip(&self.keep) {
            if !k {
                *gi = 0.0;
            }
        }
        Ok(vec![Some(g)])
    }
}

/// Tape op for [`topk_mask_forward`]; the selection is treated as constant.
pub fn topk_mask(tape: &mut Tape, scores: Var, ks: &[usize]) -> Result<Var> {
    let (out, keep, margin) = topk_mask_forward(tape.value(scores), ks)?;
    if tape.tracks_branches() {
        tape.record_branch(&keep);
    }
    tape.record_tie_margin(margin);
    Ok(tape.push(out, &[scores], TopkRule { keep }))
}

#[derive(Clone, Debug)]
pub struct TksaParams {
    pub qkv: (Var, Var),
    pub qkv_dw: (Var, Var),
    pub out_proj: (Var, Var),
    /// Per-head log temperature, `(1, heads, 1, 1)`.
    pub log_temperature: Var,
}

impl TksaParams {
    pub fn init(init: &mut Initializer, prefix: &str, config: &TksaConfig) -> Result<()> {
        config.validate()?;
        init.conv(&format!("{prefix}.qkv"), &config.qkv_spec())?;
        init.conv(&format!("{prefix}.qkv_dw"), &config.qkv_dw_spec())?;
        init.conv(&format!("{prefix}.out"), &config.out_spec())?;
        init.tensor(
            &format!("{prefix}.log_temp"),
            Tensor::zeros(Shape::new(1, config.heads, 1, 1)?),
        )
    }

    pub fn bind(vars: &ParamVars, prefix: &str) -> Result<Self> {
        let pair = |name: &str| -> Result<(Var, Var)> {
            Ok((
                vars.get(&format!("{prefix}.{name}.w"))?,
                vars.get(&format!("{prefix}.{name}.b"))?,
            ))
        };
        Ok(TksaParams {
            qkv: pair("qkv")?,
            qkv_dw: pair("qkv_dw")?,
            out_proj: pair("out")?,
            log_temperature: vars.get(&format!("{prefix}.log_temp"))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TksaTrace {
    pub output: Var,
    /// Row-stochastic attention, `(n, heads, c_hat, c_hat)`.
    pub attention: Var,
    /// Per-head values `(n, heads, c_hat, h*w)`.
    pub values: Var,
    /// Attention output before projection and residual, `(n, C, h, w)`.
    pub attended: Var,
}

pub fn tksa_forward(
    tape: &mut Tape,
    x: Var,
    params: &TksaParams,
    config: &TksaConfig,
) -> Result<Var> {
    Ok(tksa_forward_traced(tape, x, params, config)?.output)
}

pub fn tksa_forward_traced(
    tape: &mut Tape,
    x: Var,
    params: &TksaParams,
    config: &TksaConfig,
) -> Result<TksaTrace> {
    config.validate()?;
    let xs = tape.shape(x);
    if xs.c != config.channels {
        return Err(Error::shape(format!(
            "attention configured for {} channels, input has {}",
            config.channels, xs.c
        )));
    }
    let c = config.channels;
    let heads = config.heads;
    let c_hat = config.head_channels();
    let head_shape = Shape::new(xs.n, heads, c_hat, xs.plane())?;

    let qkv = nn::conv2d(
        tape,
        x,
        &config.qkv_spec(),
        params.qkv.0,
        Some(params.qkv.1),
    )?;
    let qkv = nn::conv2d(
        tape,
        qkv,
        &config.qkv_dw_spec(),
        params.qkv_dw.0,
        Some(params.qkv_dw.1),
    )?;
    let split = |i: usize, tape: &mut Tape| -> Result<Var> {
        let part = ops::slice_channels(tape, qkv, i * c, c)?;
        ops::reshape(tape, part, head_shape)
    };
    let q = split(0, tape)?;
    let k = split(1, tape)?;
    let v = split(2, tape)?;

    let q = ops::l2_normalize_rows(tape, q);
    let k = ops::l2_normalize_rows(tape, k);
    let kt = ops::transpose_last2(tape, k);
    let scores = ops::matmul(tape, q, kt)?;
    let neg_log_t = ops::affine(tape, params.log_temperature, -1.0, 0.0);
    let inv_t = ops::exp(tape, neg_log_t);
    let scores = ops::mul(tape, scores, inv_t)?;

    let masked = topk_mask(tape, scores, &config.keep_counts())?;
    let attention = ops::softmax_rows(tape, masked, 1.0)?;
    let heads_out = ops::matmul(tape, attention, v)?;
    let attended = ops::reshape(tape, heads_out, xs)?;
    let projected = nn::conv2d(
        tape,
        attended,
        &config.out_spec(),
        params.out_proj.0,
        Some(params.out_proj.1),
    )?;
    let output = ops::add(tape, projected, x)?;
    Ok(TksaTrace {
        output,
        attention,
        values: v,
        attended,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_counts_for_default_ratios() {
        assert_eq!(TksaConfig::new(8).keep_counts(), vec![1, 2, 2, 2]);
        assert_eq!(TksaConfig::new(32).keep_counts(), vec![4, 6, 6, 7]);
        assert_eq!(TksaConfig::new(24).keep_counts(), vec![3, 4, 5, 5]);
        assert_eq!(KeepRatio::new(1, 5).keep(2), 1);
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("2/3".parse::<KeepRatio>().unwrap(), KeepRatio::new(2, 3));
        assert_eq!("1".parse::<KeepRatio>().unwrap(), KeepRatio::new(1, 1));
        assert!("3/2".parse::<KeepRatio>().is_err());
        assert!("0/4".parse::<KeepRatio>().is_err());
        assert!("a".parse::<KeepRatio>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TksaConfig::new(16).validate().is_ok());
        assert!(TksaConfig::new(6).validate().is_err());
        assert!(TksaConfig::new(4).validate().is_err());
        let mut c = TksaConfig::new(16);
        c.k_ratios.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_retention_is_identity() {
        let s = Tensor::from_dims(
            [1, 1, 3, 3],
            vec![3.0, 1.0, 2.0, 0.0, 5.0, 4.0, 9.0, 9.0, 0.0],
        )
        .unwrap();
        assert_eq!(topk_mask_matrix(&s, 3).unwrap(), s);
    }

    #[test]
    fn k_one_with_tie() {
        let s = Tensor::from_dims(
            [1, 1, 3, 3],
            vec![3.0, 1.0, 2.0, 0.0, 5.0, 4.0, 9.0, 9.0, 0.0],
        )
        .unwrap();
        let m = topk_mask_matrix(&s, 1).unwrap();
        let ninf = f64::NEG_INFINITY;
        assert_eq!(
            m.data(),
            &[3.0, ninf, ninf, ninf, 5.0, ninf, 9.0, ninf, ninf]
        );
    }

    #[test]
    fn k_out_of_range() {
        let s = Tensor::zeros(Shape::new(1, 1, 3, 3).unwrap());
        assert!(matches!(topk_mask_matrix(&s, 0), Err(Error::Config(_))));
        assert!(matches!(topk_mask_matrix(&s, 4), Err(Error::Config(_))));
    }

    #[test]
    fn margin_reports_gap() {
        let s = Tensor::from_dims([1, 1, 1, 4], vec![0.1, 0.5, 0.45, -1.0]).unwrap();
        let (_, keep, margin) = topk_mask_forward(&s, &[1]).unwrap();
        assert_eq!(keep, vec![false, true, false, false]);
        assert!((margin - 0.05).abs() < 1e-15);
    }
}
