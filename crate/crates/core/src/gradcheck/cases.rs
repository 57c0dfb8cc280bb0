use crate::error::Result;
use crate::lsk::{lsk_forward, LskConfig, LskParams};
use crate::network::{self, af_fuse, ForwardCtx, NetworkConfig};
use crate::nn::{self, ConvSpec, Mode, PoolMode, RunningStats};
use crate::ops;
use crate::params::{random_tensor, Initializer, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::tksa::{tksa_forward, TksaConfig, TksaParams};

use super::{finite_difference_check_with, FdOptions, FdReport, GradCheck};

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).expect("nonzero extents")
}

/// `sum(probe * y)` with a fixed random probe, so every output entry carries a distinct weight.
fn probe_loss(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let probe = tape.constant(random_tensor(tape.shape(y), -1.0, 1.0, seed));
    let weighted = ops::mul(tape, y, probe)?;
    Ok(ops::sum(tape, weighted))
}

/// Replaces zero-initialized biases with small random values so their
/// gradients are exercised away from the symmetric starting point.
fn jitter(params: &mut ParamStore, seed: u64) {
    for (i, (_, t)) in params.iter_mut().enumerate() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = random_tensor(t.shape(), -0.3, 0.3, seed.wrapping_add(i as u64));
        }
    }
}

struct Conv2dCheck;

impl GradCheck for Conv2dCheck {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn group(&self) -> &'static str {
        "ops"
    }

    fn run(&self, opts: &FdOptions) -> Result<FdReport> {
        let dense = ConvSpec::same(3, 4, 3, 1, 1, true).with_stride(2);
        let dw = ConvSpec::depthwise(4, 3, 2, false);
        let mut p = ParamStore::new();
        p.insert("x", random_tensor(shape(2, 3, 7, 6), -1.0, 1.0, 11))?;
        p.insert(
            "dense.w",
            random_tensor(dense.weight_shape(), -1.0, 1.0, 12),
        )?;
        p.insert("dense.b", random_tensor(dense.bias_shape(), -1.0, 1.0, 13))?;
        p.insert("dw.w", random_tensor(dw.weight_shape(), -1.0, 1.0, 14))?;
        finite_difference_check_with(
            |t, v| {
                let y = nn::conv2d(
                    t,
                    v.get("x")?,
                    &dense,
                    v.get("dense.w")?,
                    Some(v.get("dense.b")?),
                )?;
                let y = nn::conv2d(t, y, &dw, v.get("dw.w")?, None)?;
                let sq = ops::mul(t, y, y)?;
                probe_loss(t, sq, 15)
            },
            &p,
            opts,
        )
    }
}

struct ChannelPoolCheck;

impl GradCheck for ChannelPoolCheck {
    fn name(&self) -> &'static str {
        "channel_pool"
    }

    fn group(&self) -> &'static str {
        "ops"
    }

    fn run(&self, opts: &FdOptions) -> Result<FdReport> {
        let mut p = ParamStore::new();
        p.insert("x", random_tensor(shape(2, 5, 4, 4), -1.0, 1.0, 21))?;
        finite_difference_check_with(
            |t, v| {
                let x = v.get("x")?;
                let a = nn::channel_pool(t, x, PoolMode::Avg)?;
                let m = nn::channel_pool(t, x, PoolMode::Max)?;
                let both = ops::concat_channels(t, &[a, m])?;
                probe_loss(t, both, 22)
            },
            &p,
            opts,
        )
    }
}

struct BatchNormCheck;

impl GradCheck for BatchNormCheck {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn group(&self) -> &'static str {
        "ops"
    }

    fn run(&self, opts: &FdOptions) -> Result<FdReport> {
        let mut p = ParamStore::new();
        p.insert("x", random_tensor(shape(2, 3, 4, 4), -2.0, 2.0, 31))?;
        p.insert("gamma", random_tensor(shape(1, 3, 1, 1), 0.5, 1.5, 32))?;
        p.insert("beta", random_tensor(shape(1, 3, 1, 1), -0.5, 0.5, 33))?;
        let stats = RunningStats {
            mean: random_tensor(shape(1, 3, 1, 1), -0.5, 0.5, 34),
            var: random_tensor(shape(1, 3, 1, 1), 0.5, 2.0, 35),
        };
        finite_difference_check_with(
            |t, v| {
                let (x, g, b) = (v.get("x")?, v.get("gamma")?, v.get("beta")?);
                let (train, _) = nn::batchnorm2d(t, x, g, b, &stats, Mode::Train)?;
                let (eval, _) = nn::batchnorm2d(t, x, g, b, &stats, Mode::Eval)?;
                let l1 = probe_loss(t, train, 36)?;
                let l2 = probe_loss(t, eval, 37)?;
                ops::add(t, l1, l2)
            },
            &p,
            opts,
        )
    }
}

struct ElementwiseCheck;

impl GradCheck for ElementwiseCheck {
    fn name(&self) -> &'static str {
        "elementwise"
    }

    fn group(&self) -> &'static str {
        "ops"
    }

    fn run(&self, opts: &FdOptions) -> Result<FdReport> {
        let mut p = ParamStore::new();
        p.insert("a", random_tensor(shape(2, 3, 2, 4), -1.0, 1.0, 41))?;
        p.insert("b", random_tensor(shape(1, 3, 1, 1), -1.0, 1.0, 42))?;
        p.insert("s", random_tensor(shape(2, 1, 2, 4), -1.0, 1.0, 43))?;
        finite_difference_check_with(
            |t, v| {
                let (a, b, s) = (v.get("a")?, v.get("b")?, v.get("s")?);
                let y = ops::mul(t, a, b)?;
                let y = ops::sub(t, y, s)?;
                let y = ops::add(t, y, b)?;
                let sig = nn::sigmoid_op(t, y);
                let r = nn::relu(t, y);
                let e = ops::exp(t, s);
                let up = nn::upsample_nearest(t, e, 2)?;
                let l1 = probe_loss(t, sig, 44)?;
                let l2 = probe_loss(t, r, 45)?;
                let l3 = probe_loss(t, up, 46)?;
                let l = ops::add(t, l1, l2)?;
                ops::add(t, l, l3)
            },
            &p,
            opts,
        )
    }
}

struct AttentionOpsCheck;

impl GradCheck for AttentionOpsCheck {
    fn name(&self) -> &'static str {
        "softmax_matmul"
    }

    fn group(&self) -> &'static str {
        "ops"
    }

    fn run(&self, opts: &FdOptions) -> Result<FdReport> {
        let mut p = ParamStore::new();
        p.insert("q", random_tensor(shape(2, 2, 3, 5), -1.0, 1.0, 51))?;
        p.insert("k", random_tensor(shape(2, 2, 3, 5), -1.0, 1.0, 52))?;
        p.insert("v", random_tensor(shape(2, 2, 3, 5), -1.0, 1.0, 53))?;
        finite_difference_check_with(
            |t, vars| {
                let q = ops::l2_normalize_rows(t, vars.get("q")?);
                let k = ops::l2_normalize_rows(t, vars.get("k")?);
                let kt = ops::transpose_last2(t, k);
                let s = ops::matmul(t, q, kt)?;
                let a = ops::softmax_rows(t, s, 0.7)?;
                let o = ops::matmul(t, a, vars.get("v")?)?;
                probe_loss(t, o, 54)
            },
            &p,
            opts,
        )
    }
}

struct AfFuseCheck;

impl GradCheck for AfFuseCheck {
    fn name(&self) -> &'static str {
        "af_fuse"
    }

    fn group(&self) -> &'static str {
        "ops"
    }

    fn run(&self, opts: &FdOptions) -> Result<FdReport> {
        let mut p = ParamStore::new();
        p.insert("ef", random_tensor(shape(2, 3, 4, 4), -1.0, 1.0, 61))?;
        p.insert("df", random_tensor(shape(2, 3, 4, 4), -1.0, 1.0, 62))?;
        p.insert("alpha", Tensor::scalar(0.3))?;
        finite_difference_check_with(
            |t, v| {
                let ff = af_fuse(t, v.get("ef")?, v.get("df")?, v.get("alpha")?)?;
                probe_loss(t, ff, 63)
            },
            &p,
            opts,
        )
    }
}

struct LossCheck;

impl GradCheck for LossCheck {
    fn name(&self) -> &'static str {
        "loss"
    }

    fn group(&self) -> &'static str {
        "ops"
    }

    fn run(&self, opts: &FdOptions) -> Result<FdReport> {
        let mut p = ParamStore::new();
        p.insert("logits", random_tensor(shape(2, 4, 3, 3), -2.0, 2.0, 71))?;
        p.insert("aux", random_tensor(shape(2, 4, 3, 3), -2.0, 2.0, 72))?;
        let labels: Vec<u8> = (0..18)
            .map(|i| {
                if i % 7 == 3 {
                    nn::IGNORE_LABEL
                } else {
                    (i * 5 % 4) as u8
                }
            })
            .collect();
        finite_difference_check_with(
            |t, v| {
                let terms = network::segmentation_loss(
                    t,
                    v.get("logits")?,
                    v.get("aux")?,
                    &labels,
                    network::DEFAULT_AUX_WEIGHT,
                )?;
                Ok(terms.total)
            },
            &p,
            opts,
        )
    }
}

pub(crate) fn lsk_case() -> Result<(LskConfig, ParamStore, Tensor)> {
    let config = LskConfig::new(4);
    let mut init = Initializer::new(81);
    LskParams::init(&mut init, "lsk", &config)?;
    let (mut params, _) = init.finish();
    jitter(&mut params, 82);
    Ok((
        config,
        params,
        random_tensor(shape(2, 4, 8, 8), -1.0, 1.0, 83),
    ))
}

struct LskCheck;

impl GradCheck for LskCheck {
    fn name(&self) -> &'static str {
        "lsk"
    }

    fn group(&self) -> &'static str {
        "lsk"
    }

    fn run(&self, opts: &FdOptions) -> Result<FdReport> {
        let (config, mut params, x) = lsk_case()?;
        params.insert("x", x)?;
        finite_difference_check_with(
            |t, v| {
                let lp = LskParams::bind(v, "lsk", &config)?;
                let y = lsk_forward(t, v.get("x")?, &lp, &config)?;
                probe_loss(t, y, 84)
            },
            &params,
            opts,
        )
    }
}

/// Minimum top-k margin required of generated attention inputs.
pub const TIE_CLEARANCE: f64 = 1e-3;

/// Attention parameters and an input whose per-row top-k scores clear the tie margin.
pub(crate) fn tksa_case(
    channels: usize,
    config: TksaConfig,
) -> Result<(TksaConfig, ParamStore, Tensor)> {
    let mut init = Initializer::new(91);
    TksaParams::init(&mut init, "tksa", &config)?;
    let (mut params, _) = init.finish();
    jitter(&mut params, 92);
    for attempt in 0.. {
        let x = random_tensor(shape(2, channels, 4, 4), -1.0, 1.0, 93 + attempt);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(x.clone());
        let tp = TksaParams::bind(&vars, "tksa")?;
        tksa_forward(&mut tape, xv, &tp, &config)?;
        if tape.tie_margin() >= TIE_CLEARANCE {
            return Ok((config, params, x));
        }
    }
    unreachable!()
}

struct TksaCheck;

impl GradCheck for TksaCheck {
    fn name(&self) -> &'static str {
        "tksa"
    }

    fn group(&self) -> &'static str {
        "tksa"
    }

    fn run(&self, opts: &FdOptions) -> Result<FdReport> {
        let (config, mut params, x) = tksa_case(16, TksaConfig::new(16))?;
        params.insert("x", x)?;
        finite_difference_check_with(
            |t, v| {
                let tp = TksaParams::bind(v, "tksa")?;
                let y = tksa_forward(t, v.get("x")?, &tp, &config)?;
                probe_loss(t, y, 94)
            },
            &params,
            opts,
        )
    }
}

fn model_check(opts: &FdOptions, input: Shape, mode: Mode, seed: u64) -> Result<FdReport> {
    let config = NetworkConfig::reduced();
    let (mut params, buffers) = network::init_params(&config, seed)?;
    jitter(&mut params, seed + 1);
    let image = random_tensor(input, 0.0, 1.0, seed + 2);
    let labels: Vec<u8> = (0..input.n * input.plane())
        .map(|i| ((i / 5 + i / 37) % config.num_classes) as u8)
        .collect();
    finite_difference_check_with(
        |t: &mut Tape, v: &ParamVars| {
            let x = t.constant(image.clone());
            let mut ctx = ForwardCtx::new(v, &buffers, mode);
            let out = network::forward(t, x, &config, &mut ctx)?;
            let terms = network::segmentation_loss(
                t,
                out.logits,
                out.aux_logits,
                &labels,
                network::DEFAULT_AUX_WEIGHT,
            )?;
            Ok(terms.total)
        },
        &params,
        opts,
    )
}

struct ModelEvalCheck;

impl GradCheck for ModelEvalCheck {
    fn name(&self) -> &'static str {
        "model"
    }

    fn group(&self) -> &'static str {
        "model"
    }

    fn run(&self, opts: &FdOptions) -> Result<FdReport> {
        model_check(opts, shape(1, 3, 16, 16), Mode::Eval, 101)
    }
}

const TRAIN_MODE_EPS: f64 = 1e-6;

struct ModelTrainCheck;

impl GradCheck for ModelTrainCheck {
    fn name(&self) -> &'static str {
        "model_train"
    }

    fn group(&self) -> &'static str {
        "model"
    }

    fn run(&self, opts: &FdOptions) -> Result<FdReport> {
        // Batch statistics make this loss sharply curved: at eps 1e-5 the
        // central-difference truncation error alone is ~7e-6 (it shrinks as
        // eps^2), so this check uses a finer step.
        let opts = FdOptions {
            eps: opts.eps.min(TRAIN_MODE_EPS),
            ..opts.clone()
        };
        model_check(&opts, shape(2, 3, 32, 32), Mode::Train, 111)
    }
}

pub fn builtin_checks() -> Vec<Box<dyn GradCheck>> {
    vec![
        Box::new(Conv2dCheck),
        Box::new(ChannelPoolCheck),
        Box::new(BatchNormCheck),
        Box::new(ElementwiseCheck),
        Box::new(AttentionOpsCheck),
        Box::new(AfFuseCheck),
        Box::new(LossCheck),
        Box::new(LskCheck),
        Box::new(TksaCheck),
        Box::new(ModelEvalCheck),
        Box::new(ModelTrainCheck),
    ]
}
