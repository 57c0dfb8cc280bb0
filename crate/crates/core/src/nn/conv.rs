use crate::error::{Error, Result};
use crate::par;
use crate::tape::{BackwardRule, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Geometry of a 2-D convolution with symmetric zero padding.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square odd kernel with padding that preserves size at stride 1.
    pub fn same(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        groups: usize,
        has_bias: bool,
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            dilation,
            groups,
            padding: dilation * (kernel.saturating_sub(1)) / 2,
            has_bias,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, dilation: usize, has_bias: bool) -> Self {
        Self::same(channels, channels, kernel, dilation, channels, has_bias)
    }

    pub fn pointwise(in_channels: usize, out_channels: usize, has_bias: bool) -> Self {
        Self::same(in_channels, out_channels, 1, 1, 1, has_bias)
    }

    pub fn with_stride(self, stride: usize) -> Self {
        ConvSpec { stride, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.out_channels > 0
            && self.groups > 0
            && self.in_channels.is_multiple_of(self.groups)
            && self.out_channels.is_multiple_of(self.groups)
            && self.kernel.0 > 0
            && self.kernel.1 > 0
            && self.stride > 0
            && self.dilation > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!("invalid convolution {self:?}")))
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape {
            n: self.out_channels,
            c: self.in_channels / self.groups,
            h: self.kernel.0,
            w: self.kernel.1,
        }
    }

    pub fn bias_shape(&self) -> Shape {
        Shape {
            n: 1,
            c: self.out_channels,
            h: 1,
            w: 1,
        }
    }

    /// Learnable scalars: weights plus optional bias.
    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.has_bias { self.out_channels } else { 0 }
    }

    fn out_extent(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::shape(format!(
                "convolution expects {} input channels, got {input}",
                self.in_channels
            )));
        }
        match (
            self.out_extent(input.h, self.kernel.0),
            self.out_extent(input.w, self.kernel.1),
        ) {
            (Some(h), Some(w)) => Ok(Shape {
                n: input.n,
                c: self.out_channels,
                h,
                w,
            }),
            _ => Err(Error::shape(format!(
                "input {input} is smaller than the dilated kernel of {self:?}"
            ))),
        }
    }

    /// Range of output columns whose tap at kernel offset `k` lands inside `0..extent`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let shift = (k * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        // o*s + shift >= 0  and  o*s + shift <= extent - 1
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi_num = extent as isize - 1 - shift;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

fn check_params(spec: &ConvSpec, weight: &Tensor, bias: Option<&Tensor>) -> Result<()> {
    spec.validate()?;
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "convolution weight {} does not match expected {}",
            weight.shape(),
            spec.weight_shape()
        )));
    }
    match (bias, spec.has_bias) {
        (Some(b), true) if b.shape() == spec.bias_shape() => Ok(()),
        (None, false) => Ok(()),
        (Some(b), true) => Err(Error::shape(format!(
            "convolution bias {} does not match expected {}",
            b.shape(),
            spec.bias_shape()
        ))),
        _ => Err(Error::shape(
            "convolution bias presence disagrees with spec",
        )),
    }
}

/// Direct cross-correlation. For every output element the taps are summed in
/// `(input channel, ky, kx)` order, skipping taps that fall in the padding,
/// and the bias is added last.
pub fn conv2d_forward(
    x: &Tensor,
    spec: &ConvSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    check_params(spec, weight, bias)?;
    let xs = x.shape();
    let os = spec.output_shape(xs)?;
    let (kh, kw) = spec.kernel;
    let icpg = spec.in_channels / spec.groups;
    let ocpg = spec.out_channels / spec.groups;
    let (ih, iw) = (xs.h, xs.w);
    let (oh, ow) = (os.h, os.w);
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.map(|b| b.data());
    let s = spec.stride;
    let d = spec.dilation;
    let p = spec.padding;

    let mut out = Tensor::zeros(os);
    par::for_each_chunk(out.data_mut(), oh * ow, |plane_idx, acc| {
        let n = plane_idx / os.c;
        let oc = plane_idx % os.c;
        let g = oc / ocpg;
        for icl in 0..icpg {
            let ic = g * icpg + icl;
            let xplane = &xd[(n * xs.c + ic) * ih * iw..][..ih * iw];
            let wbase = (oc * icpg + icl) * kh * kw;
            for ky in 0..kh {
                let (oy0, oy1) = spec.valid_range(ky, ih, oh);
                for kx in 0..kw {
                    let (ox0, ox1) = spec.valid_range(kx, iw, ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let wv = wd[wbase + ky * kw + kx];
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky * d - p;
                        let xrow = &xplane[iy * iw..][..iw];
                        let orow = &mut acc[oy * ow..][..ow];
                        if s == 1 {
                            let ix0 = ox0 + kx * d - p;
                            for (o, &xv) in
                                orow[ox0..ox1].iter_mut().zip(&xrow[ix0..ix0 + (ox1 - ox0)])
                            {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * xrow[ox * s + kx * d - p];
                            }
                        }
                    }
                }
            }
        }
        if let Some(bd) = bd {
            let b = bd[oc];
            for o in acc.iter_mut() {
                *o += b;
            }
        }
    });
    Ok(out)
}

fn conv2d_grad_input(grad: &Tensor, spec: &ConvSpec, weight: &Tensor, xs: Shape) -> Tensor {
    let os = grad.shape();
    let (kh, kw) = spec.kernel;
    let icpg = spec.in_channels / spec.groups;
    let ocpg = spec.out_channels / spec.groups;
    let (ih, iw, oh, ow) = (xs.h, xs.w, os.h, os.w);
    let (s, d, p) = (spec.stride, spec.dilation, spec.padding);
    let gd = grad.data();
    let wd = weight.data();
    let mut gx = Tensor::zeros(xs);
    par::for_each_chunk(gx.data_mut(), xs.c * ih * iw, |n, gxn| {
        for oc in 0..os.c {
            let g = oc / ocpg;
            let gplane = &gd[(n * os.c + oc) * oh * ow..][..oh * ow];
            for icl in 0..icpg {
                let ic = g * icpg + icl;
                let xplane = &mut gxn[ic * ih * iw..][..ih * iw];
                let wbase = (oc * icpg + icl) * kh * kw;
                for ky in 0..kh {
                    let (oy0, oy1) = spec.valid_range(ky, ih, oh);
                    for kx in 0..kw {
                        let (ox0, ox1) = spec.valid_range(kx, iw, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wv = wd[wbase + ky * kw + kx];
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky * d - p;
                            let grow = &gplane[oy * ow..][..ow];
                            let xrow = &mut xplane[iy * iw..][..iw];
                            if s == 1 {
                                let ix0 = ox0 + kx * d - p;
                                for (xv, &gv) in
                                    xrow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&grow[ox0..ox1])
                                {
                                    *xv += wv * gv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    xrow[ox * s + kx * d - p] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

fn conv2d_grad_weight(grad: &Tensor, spec: &ConvSpec, x: &Tensor) -> Tensor {
    let xs = x.shape();
    let os = grad.shape();
    let (kh, kw) = spec.kernel;
    let icpg = spec.in_channels / spec.groups;
    let ocpg = spec.out_channels / spec.groups;
    let (ih, iw, oh, ow) = (xs.h, xs.w, os.h, os.w);
    let (s, d, p) = (spec.stride, spec.dilation, spec.padding);
    let gd = grad.data();
    let xd = x.data();
    let mut gw = Tensor::zeros(spec.weight_shape());
    par::for_each_chunk(gw.data_mut(), icpg * kh * kw, |oc, gwo| {
        let g = oc / ocpg;
        for n in 0..xs.n {
            let gplane = &gd[(n * os.c + oc) * oh * ow..][..oh * ow];
            for icl in 0..icpg {
                let ic = g * icpg + icl;
                let xplane = &xd[(n * xs.c + ic) * ih * iw..][..ih * iw];
                for ky in 0..kh {
                    let (oy0, oy1) = spec.valid_range(ky, ih, oh);
                    for kx in 0..kw {
                        let (ox0, ox1) = spec.valid_range(kx, iw, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky * d - p;
                            let grow = &gplane[oy * ow..][..ow];
                            let xrow = &xplane[iy * iw..][..iw];
                            if s == 1 {
                                let ix0 = ox0 + kx * d - p;
                                acc += grow[ox0..ox1]
                                    .iter()
                                    .zip(&xrow[ix0..ix0 + (ox1 - ox0)])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * xrow[ox * s + kx * d - p];
                                }
                            }
                        }
                        gwo[(icl * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });
    gw
}

fn conv2d_grad_bias(grad: &Tensor) -> Tensor {
    let s = grad.shape();
    let mut gb = Tensor::zeros(Shape {
        n: 1,
        c: s.c,
        h: 1,
        w: 1,
    });
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            gb.data_mut()[c] += grad.data()[(n * s.c + c) * plane..][..plane]
                .iter()
                .sum::<f64>();
        }
    }
    gb
}

struct ConvRule(ConvSpec);

impl BackwardRule for ConvRule {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let mut out = vec![
            needs[0].then(|| conv2d_grad_input(grad, &self.0, w, x.shape())),
            needs[1].then(|| conv2d_grad_weight(grad, &self.0, x)),
        ];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| conv2d_grad_bias(grad)));
        }
        Ok(out)
    }
}

pub fn conv2d(
    tape: &mut Tape,
    x: Var,
    spec: &ConvSpec,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let out = conv2d_forward(
        tape.value(x),
        spec,
        tape.value(weight),
        bias.map(|b| tape.value(b)),
    )?;
    let inputs: Vec<Var> = [Some(x), Some(weight), bias]
        .into_iter()
        .flatten()
        .collect();
    Ok(tape.push(out, &inputs, ConvRule(*spec)))
}
