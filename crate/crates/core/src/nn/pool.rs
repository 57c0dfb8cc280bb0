use crate::error::{Error, Result};
use crate::tape::{BackwardRule, Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Per-pixel reduction across channels, plus the argmax channel in max mode
/// (lowest index wins ties) and the smallest gap between the winner and the
/// runner-up.
pub fn channel_pool_forward(x: &Tensor, mode: PoolMode) -> (Tensor, Vec<u32>, f64) {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(Shape { c: 1, ..s });
    let mut argmax = Vec::new();
    let mut margin = f64::INFINITY;
    let xd = x.data();
    let od = out.data_mut();
    match mode {
        PoolMode::Avg => {
            for n in 0..s.n {
                let o = &mut od[n * plane..][..plane];
                for c in 0..s.c {
                    for (ov, &xv) in o.iter_mut().zip(&xd[(n * s.c + c) * plane..][..plane]) {
                        *ov += xv;
                    }
                }
                for ov in o.iter_mut() {
                    *ov /= s.c as f64;
                }
            }
        }
        PoolMode::Max => {
            argmax.reserve(s.n * plane);
            for n in 0..s.n {
                for i in 0..plane {
                    let mut best = xd[n * s.c * plane + i];
                    let mut best_c = 0u32;
                    let mut second = f64::NEG_INFINITY;
                    for c in 1..s.c {
                        let v = xd[(n * s.c + c) * plane + i];
                        if v > best {
                            second = best;
                            best = v;
                            best_c = c as u32;
                        } else if v > second {
                            second = v;
                        }
                    }
                    od[n * plane + i] = best;
                    argmax.push(best_c);
                    margin = margin.min(best - second);
                }
            }
        }
    }
    (out, argmax, margin)
}

struct ChannelPoolRule {
    mode: PoolMode,
    argmax: Vec<u32>,
}

impl BackwardRule for ChannelPoolRule {
    fn name(&self) -> &'static str {
        "channel_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let s = inputs[0].shape();
        let plane = s.plane();
        let mut gx = Tensor::zeros(s);
        let gd = grad.data();
        let gxd = gx.data_mut();
        match self.mode {
            PoolMode::Avg => {
                let scale = 1.0 / s.c as f64;
                for n in 0..s.n {
                    for c in 0..s.c {
                        for (g, &up) in gxd[(n * s.c + c) * plane..][..plane]
                            .iter_mut()
                            .zip(&gd[n * plane..][..plane])
                        {
                            *g = up * scale;
                        }
                    }
                }
            }
            PoolMode::Max => {
                for n in 0..s.n {
                    for i in 0..plane {
                        let c = self.argmax[n * plane + i] as usize;
                        gxd[(n * s.c + c) * plane + i] = gd[n * plane + i];
                    }
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Mean or max across channels, giving an `(n, 1, h, w)` descriptor.
pub fn channel_pool(tape: &mut Tape, x: Var, mode: PoolMode) -> Result<Var> {
    if tape.shape(x).c == 0 {
        return Err(Error::shape("channel pool over zero channels"));
    }
    let (out, argmax, margin) = channel_pool_forward(tape.value(x), mode);
    if mode == PoolMode::Max {
        tape.record_branch(&argmax);
        tape.record_tie_margin(margin);
    }
    Ok(tape.push(out, &[x], ChannelPoolRule { mode, argmax }))
}
