//! Large selective kernel module.
//!
//! A large kernel is decomposed into a cascade of depthwise convolutions with
//! growing dilation. Each cascade tap is 1x1-mixed, the taps are pooled across
//! channels into average and max descriptors, a small convolution turns those
//! two descriptors into one sigmoid mask per tap, and the mask-weighted sum of
//! taps (after a final 1x1 mix) gates the input element-wise.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec, PoolMode};
use crate::ops;
use crate::params::{Initializer, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// One depthwise stage of the cascade.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Branch {
    pub kernel: usize,
    pub dilation: usize,
}

/// Parses `"5:1,7:3"` style lists of `kernel:dilation` pairs.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BranchList(pub Vec<Branch>);

impl FromStr for BranchList {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, d) = part
                .split_once(':')
                .ok_or_else(|| Error::config(format!("branch `{part}` is not kernel:dilation")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("branch `{part}` has a non-integer field")))
            };
            out.push(Branch {
                kernel: parse(k)?,
                dilation: parse(d)?,
            });
        }
        if out.is_empty() {
            return Err(Error::config("branch list is empty"));
        }
        Ok(BranchList(out))
    }
}

impl fmt::Display for BranchList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|b| format!("{}:{}", b.kernel, b.dilation))
            .collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LskConfig {
    pub channels: usize,
    pub branches: Vec<Branch>,
    /// Square kernel of the descriptor-to-mask convolution.
    pub mask_kernel: usize,
}

impl LskConfig {
    pub fn new(channels: usize) -> Self {
        LskConfig {
            channels,
            branches: vec![
                Branch {
                    kernel: 5,
                    dilation: 1,
                },
                Branch {
                    kernel: 7,
                    dilation: 3,
                },
            ],
            mask_kernel: 7,
        }
    }

    pub fn with_branches(channels: usize, branches: Vec<Branch>) -> Self {
        LskConfig {
            branches,
            ..Self::new(channels)
        }
    }

    /// One mask per branch.
    pub fn n_masks(&self) -> usize {
        self.branches.len()
    }

    pub fn validate(&self) -> Result<()> {
        validate_branches(&self.branches)?;
        if self.channels == 0 {
            return Err(Error::config("LSK needs at least one channel"));
        }
        if self.mask_kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "mask kernel {} must be odd",
                self.mask_kernel
            )));
        }
        Ok(())
    }

    pub fn depthwise_spec(&self, i: usize) -> ConvSpec {
        let b = self.branches[i];
        ConvSpec::depthwise(self.channels, b.kernel, b.dilation, false)
    }

    pub fn mix_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.channels, self.channels, true)
    }

    pub fn mask_spec(&self) -> ConvSpec {
        ConvSpec::same(2, self.n_masks(), self.mask_kernel, 1, 1, true)
    }

    /// Every convolution of the module, named relative to its prefix.
    pub fn conv_specs(&self) -> Vec<(String, ConvSpec)> {
        let mut out = Vec::new();
        for i in 0..self.branches.len() {
            out.push((format!("dw{i}"), self.depthwise_spec(i)));
            out.push((format!("mix{i}"), self.mix_spec()));
        }
        out.push(("mask".into(), self.mask_spec()));
        out.push(("out".into(), self.mix_spec()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.conv_specs().iter().map(|(_, s)| s.param_count()).sum()
    }
}

/// Nonempty, odd kernels, strictly increasing dilation.
pub fn validate_branches(branches: &[Branch]) -> Result<()> {
    if branches.is_empty() {
        return Err(Error::config("LSK needs at least one branch"));
    }
    for b in branches {
        if b.kernel == 0 || b.kernel % 2 == 0 || b.dilation == 0 {
            return Err(Error::config(format!(
                "branch {}:{} needs an odd kernel and positive dilation",
                b.kernel, b.dilation
            )));
        }
    }
    if branches.windows(2).any(|w| w[1].dilation <= w[0].dilation) {
        return Err(Error::config(
            "branch dilations must be strictly increasing",
        ));
    }
    Ok(())
}

/// Effective receptive field of the sequential cascade: `1 + sum d_i (k_i - 1)`.
pub fn receptive_field(config: &LskConfig) -> usize {
    1 + config
        .branches
        .iter()
        .map(|b| b.dilation * (b.kernel - 1))
        .sum::<usize>()
}

/// Feeds a unit impulse through the depthwise cascade with random strictly
/// positive weights and returns the (rows, cols) of the nonzero bounding box.
pub fn measure_impulse_support(branches: &[Branch], seed: u64) -> Result<(usize, usize)> {
    validate_branches(branches)?;
    let reach: usize = branches.iter().map(|b| b.dilation * (b.kernel - 1)).sum();
    let size = 2 * reach + 3;
    let mut x = Tensor::zeros(Shape::new(1, 1, size, size)?);
    x.data_mut()[(size / 2) * size + size / 2] = 1.0;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for b in branches {
        let spec = ConvSpec::depthwise(1, b.kernel, b.dilation, false);
        let w = Tensor::from_vec(
            spec.weight_shape(),
            (0..b.kernel * b.kernel)
                .map(|_| rng.gen_range(0.5..1.5))
                .collect(),
        )?;
        x = nn::conv2d_forward(&x, &spec, &w, None)?;
    }
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..size {
        for c in 0..size {
            if x.at(0, 0, r, c) != 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Ok((0, 0));
    }
    Ok((r1 - r0 + 1, c1 - c0 + 1))
}

/// Tape handles for one module's parameters.
#[derive(Clone, Debug)]
pub struct LskParams {
    pub dw_weights: Vec<Var>,
    pub mix: Vec<(Var, Var)>,
    pub mask_conv: (Var, Var),
    pub out_mix: (Var, Var),
}

impl LskParams {
    pub fn init(init: &mut Initializer, prefix: &str, config: &LskConfig) -> Result<()> {
        config.validate()?;
        for (name, spec) in config.conv_specs() {
            init.conv(&format!("{prefix}.{name}"), &spec)?;
        }
        Ok(())
    }

    pub fn bind(vars: &ParamVars, prefix: &str, config: &LskConfig) -> Result<Self> {
        let pair = |name: &str| -> Result<(Var, Var)> {
            Ok((
                vars.get(&format!("{prefix}.{name}.w"))?,
                vars.get(&format!("{prefix}.{name}.b"))?,
            ))
        };
        let n = config.branches.len();
        Ok(LskParams {
            dw_weights: (0..n)
                .map(|i| vars.get(&format!("{prefix}.dw{i}.w")))
                .collect::<Result<_>>()?,
            mix: (0..n)
                .map(|i| pair(&format!("mix{i}")))
                .collect::<Result<_>>()?,
            mask_conv: pair("mask")?,
            out_mix: pair("out")?,
        })
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct LskTrace {
    pub output: Var,
    /// Mixed cascade taps, one `(n, C, h, w)` per branch.
    pub taps: Vec<Var>,
    /// Sigmoid masks, `(n, N, h, w)`.
    pub masks: Var,
}

pub fn lsk_forward(tape: &mut Tape, x: Var, params: &LskParams, config: &LskConfig) -> Result<Var> {
    Ok(lsk_forward_traced(tape, x, params, config)?.output)
}

pub fn lsk_forward_traced(
    tape: &mut Tape,
    x: Var,
    params: &LskParams,
    config: &LskConfig,
) -> Result<LskTrace> {
    let c = tape.shape(x).c;
    if c != config.channels {
        return Err(Error::shape(format!(
            "LSK configured for {} channels, input has {c}",
            config.channels
        )));
    }
    let mix_spec = config.mix_spec();

    let mut taps = Vec::with_capacity(config.branches.len());
    let mut cascade = x;
    for (i, (&dw, &(mw, mb))) in params.dw_weights.iter().zip(&params.mix).enumerate() {
        cascade = nn::conv2d(tape, cascade, &config.depthwise_spec(i), dw, None)?;
        taps.push(nn::conv2d(tape, cascade, &mix_spec, mw, Some(mb))?);
    }

    let u = ops::concat_channels(tape, &taps)?;
    let u_avg = nn::channel_pool(tape, u, PoolMode::Avg)?;
    let u_max = nn::channel_pool(tape, u, PoolMode::Max)?;
    let desc = ops::concat_channels(tape, &[u_avg, u_max])?;
    let (kw, kb) = params.mask_conv;
    let logits = nn::conv2d(tape, desc, &config.mask_spec(), kw, Some(kb))?;
    let masks = nn::sigmoid_op(tape, logits);

    let mut selected: Option<Var> = None;
    for (i, &tap) in taps.iter().enumerate() {
        let m = ops::slice_channels(tape, masks, i, 1)?;
        let weighted = ops::mul(tape, tap, m)?;
        selected = Some(match selected {
            None => weighted,
            Some(acc) => ops::add(tape, acc, weighted)?,
        });
    }
    let selected = selected.expect("at least one branch");
    let (ow, ob) = params.out_mix;
    let s = nn::conv2d(tape, selected, &mix_spec, ow, Some(ob))?;
    let output = ops::mul(tape, x, s)?;
    Ok(LskTrace {
        output,
        taps,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(kernel: usize, dilation: usize) -> Branch {
        Branch { kernel, dilation }
    }

    #[test]
    fn receptive_field_examples() {
        assert_eq!(
            receptive_field(&LskConfig::with_branches(1, vec![b(5, 1)])),
            5
        );
        assert_eq!(receptive_field(&LskConfig::new(1)), 23);
        assert_eq!(
            receptive_field(&LskConfig::with_branches(1, vec![b(3, 1), b(3, 2)])),
            7
        );
    }

    #[test]
    fn impulse_support_matches_formula() {
        assert_eq!(
            measure_impulse_support(&[b(5, 1), b(7, 3)], 1).unwrap(),
            (23, 23)
        );
        assert_eq!(
            measure_impulse_support(&[b(3, 1), b(3, 2)], 2).unwrap(),
            (7, 7)
        );
        assert_eq!(measure_impulse_support(&[b(5, 1)], 3).unwrap(), (5, 5));
    }

    #[test]
    fn branch_parsing() {
        let l: BranchList = "5:1, 7:3".parse().unwrap();
        assert_eq!(l.0, vec![b(5, 1), b(7, 3)]);
        assert_eq!(l.to_string(), "5:1,7:3");
        assert!("5".parse::<BranchList>().is_err());
        assert!("".parse::<BranchList>().is_err());
        assert!("5:x".parse::<BranchList>().is_err());
    }

    #[test]
    fn branch_validation() {
        assert!(validate_branches(&[b(5, 1), b(7, 3)]).is_ok());
        assert!(validate_branches(&[b(5, 2), b(7, 2)]).is_err());
        assert!(validate_branches(&[b(4, 1)]).is_err());
        assert!(validate_branches(&[]).is_err());
    }

    #[test]
    fn default_param_count() {
        // dw 5x5 + dw 7x7 (no bias), two mixes, 2->2 7x7 mask conv, out mix
        let c = 8;
        let expected = c * 25 + c * 49 + 2 * (c * c + c) + (2 * 2 * 49 + 2) + (c * c + c);
        assert_eq!(LskConfig::new(c).param_count(), expected);
    }
}
