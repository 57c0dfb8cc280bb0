use crate::error::{Error, Result};
use crate::tape::{BackwardRule, Tape, Var};
use crate::tensor::{Shape, Tensor};

pub fn upsample_nearest_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::shape("upsample factor must be at least 1"));
    }
    let s = x.shape();
    let os = Shape {
        h: s.h * factor,
        w: s.w * factor,
        ..s
    };
    let mut out = Tensor::zeros(os);
    let xd = x.data();
    let od = out.data_mut();
    for slice in 0..s.n * s.c {
        let src = &xd[slice * s.plane()..][..s.plane()];
        let dst = &mut od[slice * os.plane()..][..os.plane()];
        for oy in 0..os.h {
            let srow = &src[(oy / factor) * s.w..][..s.w];
            for (ox, d) in dst[oy * os.w..][..os.w].iter_mut().enumerate() {
                *d = srow[ox / factor];
            }
        }
    }
    Ok(out)
}

struct UpsampleRule(usize);

impl BackwardRule for UpsampleRule {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let f = self.0;
        let s = inputs[0].shape();
        let gs = grad.shape();
        let mut gx = Tensor::zeros(s);
        let gd = grad.data();
        let xd = gx.data_mut();
        for slice in 0..s.n * s.c {
            let src = &gd[slice * gs.plane()..][..gs.plane()];
            let dst = &mut xd[slice * s.plane()..][..s.plane()];
            for oy in 0..gs.h {
                for ox in 0..gs.w {
                    dst[(oy / f) * s.w + ox / f] += src[oy * gs.w + ox];
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Replicates each pixel into a `factor x factor` block.
pub fn upsample_nearest(tape: &mut Tape, x: Var, factor: usize) -> Result<Var> {
    if factor == 1 {
        return Ok(x);
    }
    let out = upsample_nearest_forward(tape.value(x), factor)?;
    Ok(tape.push(out, &[x], UpsampleRule(factor)))
}
