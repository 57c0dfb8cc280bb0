//! Differentiable tensor-level ops: element-wise arithmetic with broadcasting,
//! batched matrix products, row softmax and layout helpers.
//!
//! Matrix ops treat a `(n, c, h, w)` tensor as `n * c` independent `h x w`
//! matrices, one per (batch, head) slice.

use crate::error::{Error, Result};
use crate::tape::{BackwardRule, Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EwOp {
    Add,
    Sub,
    Mul,
}

/// Strides that map an index of `full` onto `small`, zero along broadcast axes.
fn broadcast_strides(full: Shape, small: Shape) -> [usize; 4] {
    let s = small.dims();
    let f = full.dims();
    let dense = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = if s[i] == f[i] { dense[i] } else { 0 };
    }
    out
}

fn for_each_broadcast(full: Shape, small: Shape, mut f: impl FnMut(usize, usize)) {
    let st = broadcast_strides(full, small);
    let mut i = 0;
    for n in 0..full.n {
        for c in 0..full.c {
            for h in 0..full.h {
                let base = n * st[0] + c * st[1] + h * st[2];
                for w in 0..full.w {
                    f(i, base + w * st[3]);
                    i += 1;
                }
            }
        }
    }
}

/// Sums `grad` (shaped like `full`) down to `small`.
fn reduce_to(grad: &Tensor, small: Shape) -> Tensor {
    if grad.shape() == small {
        return grad.clone();
    }
    let mut out = Tensor::zeros(small);
    let g = grad.data();
    let o = out.data_mut();
    for_each_broadcast(grad.shape(), small, |i, j| o[j] += g[i]);
    out
}

pub fn ew_forward(op: EwOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if !sa.broadcasts_from(&sb) {
        return Err(Error::shape(format!(
            "cannot broadcast {sb} over {sa} in element-wise {op:?}"
        )));
    }
    let f = match op {
        EwOp::Add => |x: f64, y: f64| x + y,
        EwOp::Sub => |x: f64, y: f64| x - y,
        EwOp::Mul => |x: f64, y: f64| x * y,
    };
    let mut out = a.clone();
    if sa == sb {
        for (o, &y) in out.data_mut().iter_mut().zip(b.data()) {
            *o = f(*o, y);
        }
    } else {
        let bd = b.data();
        let o = out.data_mut();
        for_each_broadcast(sa, sb, |i, j| o[i] = f(o[i], bd[j]));
    }
    Ok(out)
}

struct EwRule(EwOp);

impl BackwardRule for EwRule {
    fn name(&self) -> &'static str {
        "ew"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = needs[0].then(|| match self.0 {
            EwOp::Add | EwOp::Sub => grad.clone(),
            EwOp::Mul => {
                let mut g = grad.clone();
                if a.shape() == b.shape() {
                    for (gi, &bi) in g.data_mut().iter_mut().zip(b.data()) {
                        *gi *= bi;
                    }
                } else {
                    let bd = b.data();
                    let gd = g.data_mut();
                    for_each_broadcast(a.shape(), b.shape(), |i, j| gd[i] *= bd[j]);
                }
                g
            }
        });
        let gb = needs[1].then(|| match self.0 {
            EwOp::Add => reduce_to(grad, b.shape()),
            EwOp::Sub => reduce_to(&grad.map(|v| -v), b.shape()),
            EwOp::Mul => {
                let mut g = grad.clone();
                for (gi, &ai) in g.data_mut().iter_mut().zip(a.data()) {
                    *gi *= ai;
                }
                reduce_to(&g, b.shape())
            }
        });
        Ok(vec![ga, gb])
    }
}

/// Element-wise `a op b`; `b` may broadcast over `a` along unit axes.
pub fn ew(tape: &mut Tape, op: EwOp, a: Var, b: Var) -> Result<Var> {
    let out = ew_forward(op, tape.value(a), tape.value(b))?;
    Ok(tape.push(out, &[a, b], EwRule(op)))
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    ew(tape, EwOp::Add, a, b)
}

pub fn sub(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    ew(tape, EwOp::Sub, a, b)
}

pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    ew(tape, EwOp::Mul, a, b)
}

struct AffineRule(f64);

impl BackwardRule for AffineRule {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let scale = self.0;
        Ok(vec![Some(grad.map(|g| g * scale))])
    }
}

/// `scale * x + shift` with constant coefficients.
pub fn affine(tape: &mut Tape, x: Var, scale: f64, shift: f64) -> Var {
    let out = tape.value(x).map(|v| scale * v + shift);
    tape.push(out, &[x], AffineRule(scale))
}

struct ExpRule;

impl BackwardRule for ExpRule {
    fn name(&self) -> &'static str {
        "exp"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut g = grad.clone();
        for (gi, &y) in g.data_mut().iter_mut().zip(output.data()) {
            *gi *= y;
        }
        Ok(vec![Some(g)])
    }
}

pub fn exp(tape: &mut Tape, x: Var) -> Var {
    let out = tape.value(x).map(f64::exp);
    tape.push(out, &[x], ExpRule)
}

struct SumRule {
    scale: f64,
}

impl BackwardRule for SumRule {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(
            inputs[0].shape(),
            grad.item() * self.scale,
        ))])
    }
}

/// Sum of all entries as a `(1, 1, 1, 1)` scalar.
pub fn sum(tape: &mut Tape, x: Var) -> Var {
    let s = tape.value(x).sum();
    tape.push(Tensor::scalar(s), &[x], SumRule { scale: 1.0 })
}

pub fn mean(tape: &mut Tape, x: Var) -> Var {
    let t = tape.value(x);
    let n = t.len() as f64;
    let s = t.sum() / n;
    tape.push(Tensor::scalar(s), &[x], SumRule { scale: 1.0 / n })
}

struct ReshapeRule;

impl BackwardRule for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.reshaped(inputs[0].shape())?)])
    }
}

pub fn reshape(tape: &mut Tape, x: Var, shape: Shape) -> Result<Var> {
    let out = tape.value(x).reshaped(shape)?;
    Ok(tape.push(out, &[x], ReshapeRule))
}

pub fn transpose_last2_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let out_shape = Shape {
        h: s.w,
        w: s.h,
        ..s
    };
    let mut out = Tensor::zeros(out_shape);
    let src = x.data();
    let dst = out.data_mut();
    let plane = s.plane();
    for slice in 0..s.n * s.c {
        let base = slice * plane;
        for r in 0..s.h {
            for c in 0..s.w {
                dst[base + c * s.h + r] = src[base + r * s.w + c];
            }
        }
    }
    out
}

struct TransposeRule;

impl BackwardRule for TransposeRule {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(transpose_last2_forward(grad))])
    }
}

/// Swaps the two trailing axes of every (batch, head) slice.
pub fn transpose_last2(tape: &mut Tape, x: Var) -> Var {
    let out = transpose_last2_forward(tape.value(x));
    tape.push(out, &[x], TransposeRule)
}

/// Per-slice `a (r x k) * b (k x m)`.
pub fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.c != sb.c || sa.w != sb.h {
        return Err(Error::shape(format!("matmul of {sa} by {sb}")));
    }
    let (r, k, m) = (sa.h, sa.w, sb.w);
    let mut out = Tensor::zeros(Shape { w: m, ..sa });
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for slice in 0..sa.n * sa.c {
        let a0 = slice * r * k;
        let b0 = slice * k * m;
        let o0 = slice * r * m;
        for i in 0..r {
            let orow = &mut od[o0 + i * m..o0 + (i + 1) * m];
            for p in 0..k {
                let av = ad[a0 + i * k + p];
                let brow = &bd[b0 + p * m..b0 + (p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(out)
}

struct MatmulRule;

impl BackwardRule for MatmulRule {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = if needs[0] {
            Some(matmul_forward(grad, &transpose_last2_forward(b))?)
        } else {
            None
        };
        let gb = if needs[1] {
            Some(matmul_forward(&transpose_last2_forward(a), grad)?)
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

pub fn matmul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let out = matmul_forward(tape.value(a), tape.value(b))?;
    Ok(tape.push(out, &[a, b], MatmulRule))
}

/// Softmax along the last axis. Entries equal to `-inf` are masked and map to
/// exactly zero; a row with no finite entry is an error.
pub fn softmax_rows_forward(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let w = x.shape().w;
    let mut out = x.clone();
    for (row, chunk) in out.data_mut().chunks_exact_mut(w).enumerate() {
        let max = chunk
            .iter()
            .copied()
            .filter(|v| *v != f64::NEG_INFINITY)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row });
        }
        let mut total = 0.0;
        for v in chunk.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            total += *v;
        }
        for v in chunk.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

struct SoftmaxRule {
    temperature: f64,
}

impl BackwardRule for SoftmaxRule {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let w = output.shape().w;
        let mut gx = grad.clone();
        for (gr, yr) in gx
            .data_mut()
            .chunks_exact_mut(w)
            .zip(output.data().chunks_exact(w))
        {
            let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
            for (g, &y) in gr.iter_mut().zip(yr) {
                *g = y * (*g - dot) / self.temperature;
            }
        }
        Ok(vec![Some(gx)])
    }
}

pub fn softmax_rows(tape: &mut Tape, x: Var, temperature: f64) -> Result<Var> {
    let out = softmax_rows_forward(tape.value(x), temperature)?;
    Ok(tape.push(out, &[x], SoftmaxRule { temperature }))
}

const NORM_EPS: f64 = 1e-12;

struct L2NormRule;

impl BackwardRule for L2NormRule {
    fn name(&self) -> &'static str {
        "l2_normalize_rows"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let w = output.shape().w;
        let mut gx = grad.clone();
        for ((gr, yr), xr) in gx
            .data_mut()
            .chunks_exact_mut(w)
            .zip(output.data().chunks_exact(w))
            .zip(inputs[0].data().chunks_exact(w))
        {
            let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > NORM_EPS {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for (g, &y) in gr.iter_mut().zip(yr) {
                    *g = (*g - y * dot) / norm;
                }
            } else {
                for g in gr.iter_mut() {
                    *g /= NORM_EPS;
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Scales each row (last axis) to unit Euclidean norm; norms below 1e-12 are clamped.
pub fn l2_normalize_rows(tape: &mut Tape, x: Var) -> Var {
    let xv = tape.value(x);
    let w = xv.shape().w;
    let mut out = xv.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    tape.push(out, &[x], L2NormRule)
}

struct ConcatRule {
    widths: Vec<usize>,
}

impl BackwardRule for ConcatRule {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(self.widths.len());
        for (&width, &need) in self.widths.iter().zip(needs) {
            out.push(if need {
                Some(slice_channels_forward(grad, start, width)?)
            } else {
                None
            });
            start += width;
        }
        Ok(out)
    }
}

pub fn concat_channels_forward(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?
        .shape();
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(format!(
                "concat of {s} with {first} along channels"
            )));
        }
    }
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let shape = Shape { c, ..first };
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..first.n {
        for p in parts {
            let block = p.shape().c * first.plane();
            data.extend_from_slice(&p.data()[n * block..(n + 1) * block]);
        }
    }
    Tensor::from_vec(shape, data)
}

pub fn concat_channels(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let values: Vec<&Tensor> = parts.iter().map(|v| tape.value(*v)).collect();
    let out = concat_channels_forward(&values)?;
    let widths = values.iter().map(|t| t.shape().c).collect();
    Ok(tape.push(out, parts, ConcatRule { widths }))
}

pub fn slice_channels_forward(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::shape(format!(
            "channel slice {start}..{} of {s}",
            start + len
        )));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        let from = (n * s.c + start) * plane;
        data.extend_from_slice(&x.data()[from..from + len * plane]);
    }
    Tensor::from_vec(Shape { c: len, ..s }, data)
}

struct SliceRule {
    start: usize,
}

impl BackwardRule for SliceRule {
    fn name(&self) -> &'static str {
        "slice_channels"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let s = inputs[0].shape();
        let gs = grad.shape();
        let plane = s.plane();
        let mut gx = Tensor::zeros(s);
        let dst = gx.data_mut();
        for n in 0..s.n {
            let to = (n * s.c + self.start) * plane;
            let from = n * gs.c * plane;
            dst[to..to + gs.c * plane].copy_from_slice(&grad.data()[from..from + gs.c * plane]);
        }
        Ok(vec![Some(gx)])
    }
}

pub fn slice_channels(tape: &mut Tape, x: Var, start: usize, len: usize) -> Result<Var> {
    let out = slice_channels_forward(tape.value(x), start, len)?;
    Ok(tape.push(out, &[x], SliceRule { start }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], data: &[f64]) -> Tensor {
        Tensor::from_dims(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn ew_identities() {
        let x = t([1, 2, 1, 2], &[0.5, -1.0, 2.0, 3.25]);
        let ones = Tensor::ones(x.shape());
        let zeros = Tensor::zeros(x.shape());
        assert_eq!(ew_forward(EwOp::Mul, &x, &ones).unwrap(), x);
        assert_eq!(ew_forward(EwOp::Add, &x, &zeros).unwrap(), x);
    }

    #[test]
    fn ew_scalar_broadcast() {
        let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let two = Tensor::scalar(2.0);
        assert_eq!(
            ew_forward(EwOp::Mul, &x, &two).unwrap().data(),
            &[2.0, 4.0, 6.0, 8.0]
        );
    }

    #[test]
    fn ew_channel_broadcast_and_reduction() {
        let mut tape = Tape::new();
        let a = tape.param(
            "a",
            t([2, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]),
        );
        let b = tape.param("b", t([1, 2, 1, 1], &[10.0, 100.0]));
        let y = mul(&mut tape, a, b).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[10.0, 20.0, 300.0, 400.0, 50.0, 60.0, 700.0, 800.0]
        );
        let loss = sum(&mut tape, y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(
            g.wrt(b).data(),
            &[1.0 + 2.0 + 5.0 + 6.0, 3.0 + 4.0 + 7.0 + 8.0]
        );
    }

    #[test]
    fn ew_rejects_incompatible() {
        let a = Tensor::zeros(Shape::new(1, 2, 2, 2).unwrap());
        let b = Tensor::zeros(Shape::new(1, 3, 1, 1).unwrap());
        assert!(matches!(
            ew_forward(EwOp::Add, &a, &b),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matmul_hand_example() {
        let a = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t([1, 1, 2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(
            matmul_forward(&a, &b).unwrap().data(),
            &[19.0, 22.0, 43.0, 50.0]
        );
    }

    #[test]
    fn matmul_identity_and_zero() {
        let id = t([1, 1, 3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let m = t(
            [1, 1, 3, 3],
            &[0.3, -1.0, 2.0, 4.5, 0.0, 1.5, -2.0, 7.0, 0.25],
        );
        assert_eq!(matmul_forward(&id, &m).unwrap(), m);
        let z = Tensor::zeros(m.shape());
        assert!(matmul_forward(&m, &z)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::zeros(Shape::new(1, 1, 2, 3).unwrap());
        let b = Tensor::zeros(Shape::new(1, 1, 2, 3).unwrap());
        assert!(matches!(matmul_forward(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let c = 0.7;
        let y = softmax_rows_forward(&t([1, 1, 1, 3], &[c, c, c]), 1.0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_rows_forward(&t([1, 1, 1, 2], &[0.0, 2f64.ln()]), 1.0).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let y =
            softmax_rows_forward(&t([1, 1, 1, 3], &[5.0, f64::NEG_INFINITY, 5.0]), 1.0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn softmax_fully_masked_row() {
        let x = t(
            [1, 1, 2, 2],
            &[1.0, 2.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
        );
        assert!(matches!(
            softmax_rows_forward(&x, 1.0),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = t([2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t([2, 2, 1, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let cat = concat_channels_forward(&[&a, &b]).unwrap();
        assert_eq!(
            cat.data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        assert_eq!(slice_channels_forward(&cat, 0, 1).unwrap(), a);
        assert_eq!(slice_channels_forward(&cat, 1, 2).unwrap(), b);
        assert!(slice_channels_forward(&cat, 2, 2).is_err());
    }

    #[test]
    fn l2_rows_have_unit_norm() {
        let mut tape = Tape::new();
        let x = tape.constant(t([1, 1, 2, 3], &[3.0, 0.0, 4.0, 1.0, 1.0, 1.0]));
        let y = l2_normalize_rows(&mut tape, x);
        for row in tape.value(y).data().chunks(3) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-15);
        }
    }
}
