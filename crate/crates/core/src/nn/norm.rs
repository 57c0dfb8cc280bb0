use crate::error::{Error, Result};
use crate::tape::{BackwardRule, Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and variance, each shaped `(1, c, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        let s = Shape {
            n: 1,
            c: channels,
            h: 1,
            w: 1,
        };
        RunningStats {
            mean: Tensor::zeros(s),
            var: Tensor::ones(s),
        }
    }
}

struct BatchNormRule {
    normalized: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BackwardRule for BatchNormRule {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let gamma = inputs[1].data();
        let s = grad.shape();
        let plane = s.plane();
        let count = (s.n * plane) as f64;
        let gd = grad.data();
        let xh = self.normalized.data();

        let mut sum_g = vec![0.0; s.c];
        let mut sum_gx = vec![0.0; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                for i in base..base + plane {
                    sum_g[c] += gd[i];
                    sum_gx[c] += gd[i] * xh[i];
                }
            }
        }

        let gx = needs[0].then(|| {
            let mut gx = Tensor::zeros(s);
            let out = gx.data_mut();
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane;
                    let k = gamma[c] * self.inv_std[c];
                    for i in base..base + plane {
                        out[i] = match self.mode {
                            Mode::Train => {
                                k * (gd[i] - sum_g[c] / count - xh[i] * sum_gx[c] / count)
                            }
                            Mode::Eval => k * gd[i],
                        };
                    }
                }
            }
            gx
        });
        let cs = inputs[1].shape();
        let ggamma = needs[1].then(|| Tensor::from_vec(cs, sum_gx.clone()).expect("gamma shape"));
        let gbeta = needs[2].then(|| Tensor::from_vec(cs, sum_g.clone()).expect("beta shape"));
        Ok(vec![gx, ggamma, gbeta])
    }
}

/// Batch normalization over `(n, h, w)` per channel.
///
/// Train mode normalizes with batch statistics and returns updated running
/// statistics (unbiased variance, momentum 0.1). Eval mode uses `stats` as is.
pub fn batchnorm2d(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &RunningStats,
    mode: Mode,
) -> Result<(Var, Option<RunningStats>)> {
    let xv = tape.value(x);
    let s = xv.shape();
    let cs = Shape {
        n: 1,
        c: s.c,
        h: 1,
        w: 1,
    };
    for (what, t) in [
        ("gamma", tape.value(gamma)),
        ("beta", tape.value(beta)),
        ("running mean", &stats.mean),
        ("running var", &stats.var),
    ] {
        if t.shape() != cs {
            return Err(Error::shape(format!(
                "batchnorm {what} {} for input {s}",
                t.shape()
            )));
        }
    }
    let plane = s.plane();
    let count = s.n * plane;
    let xd = xv.data();

    let (mean, var) = match mode {
        Mode::Train => {
            if count <= 1 {
                return Err(Error::DegenerateStatistics(count));
            }
            let mut mean = vec![0.0; s.c];
            let mut var = vec![0.0; s.c];
            for c in 0..s.c {
                let mut acc = 0.0;
                for n in 0..s.n {
                    acc += xd[(n * s.c + c) * plane..][..plane].iter().sum::<f64>();
                }
                mean[c] = acc / count as f64;
                let mut sq = 0.0;
                for n in 0..s.n {
                    sq += xd[(n * s.c + c) * plane..][..plane]
                        .iter()
                        .map(|v| (v - mean[c]) * (v - mean[c]))
                        .sum::<f64>();
                }
                var[c] = sq / count as f64;
            }
            (mean, var)
        }
        Mode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let g = tape.value(gamma).data();
    let b = tape.value(beta).data();
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    {
        let nd = normalized.data_mut();
        let od = out.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                for i in base..base + plane {
                    let xh = (xd[i] - mean[c]) * inv_std[c];
                    nd[i] = xh;
                    od[i] = g[c] * xh + b[c];
                }
            }
        }
    }

    let updated = (mode == Mode::Train).then(|| {
        let unbias = count as f64 / (count as f64 - 1.0);
        let blend = |old: &Tensor, new: &[f64], scale: f64| {
            let data = old
                .data()
                .iter()
                .zip(new)
                .map(|(o, v)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * v * scale)
                .collect();
            Tensor::from_vec(cs, data).expect("stat shape")
        };
        RunningStats {
            mean: blend(&stats.mean, &mean, 1.0),
            var: blend(&stats.var, &var, unbias),
        }
    });

    let y = tape.push(
        out,
        &[x, gamma, beta],
        BatchNormRule {
            normalized,
            inv_std,
            mode,
        },
    );
    Ok((y, updated))
}
