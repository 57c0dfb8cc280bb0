//! Independent reference implementations used by the integration tests.
//!
//! Everything here is written directly against tensor data with plain loops;
//! nothing calls the library's differentiable ops.

#![allow(dead_code)]

use std::collections::BTreeSet;

use lsksa::lsk::{Branch, LskConfig};
use lsksa::network::NetworkConfig;
use lsksa::nn::ConvSpec;
use lsksa::tksa::TksaConfig;
use lsksa::{ParamStore, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Xoshiro256PlusPlus) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Brute-force cross-correlation. Per output element: taps in
/// (input channel, ky, kx) order, padding taps skipped, bias added last.
pub fn conv_ref(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let xs = x.shape();
    let (kh, kw) = spec.kernel;
    let span = |k: usize| spec.dilation * (k - 1) + 1;
    let oh = (xs.h + 2 * spec.padding - span(kh)) / spec.stride + 1;
    let ow = (xs.w + 2 * spec.padding - span(kw)) / spec.stride + 1;
    let icpg = spec.in_channels / spec.groups;
    let ocpg = spec.out_channels / spec.groups;
    let mut out = Tensor::zeros(Shape::new(xs.n, spec.out_channels, oh, ow).unwrap());
    for n in 0..xs.n {
        for oc in 0..spec.out_channels {
            let g = oc / ocpg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for icl in 0..icpg {
                        let ic = g * icpg + icl;
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                - spec.padding as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                acc +=
                                    x.at(n, ic, iy as usize, ix as usize) * w.at(oc, icl, ky, kx);
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b.data()[oc];
                    }
                    let i = out.shape().offset(n, oc, oy, ox);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    out
}

fn conv_named(x: &Tensor, spec: &ConvSpec, p: &ParamStore, name: &str) -> Tensor {
    let w = p.get(&format!("{name}.w")).unwrap();
    let b = p.get(&format!("{name}.b"));
    conv_ref(x, spec, w, if spec.has_bias { b } else { None })
}

/// The `k` largest entries of `row` by a full stable sort (value descending,
/// index ascending).
pub fn sort_topk(row: &[f64], k: usize) -> BTreeSet<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.into_iter().take(k).collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Unmasked channel attention computed from the parameter store directly.
/// Returns the block output and the per-(n, head) attention matrices.
pub fn dense_attention_ref(
    x: &Tensor,
    p: &ParamStore,
    prefix: &str,
    cfg: &TksaConfig,
) -> (Tensor, Vec<Vec<f64>>) {
    let xs = x.shape();
    let c = cfg.channels;
    let heads = cfg.heads;
    let ch = c / heads;
    let hw = xs.h * xs.w;
    let qkv = conv_named(x, &cfg.qkv_spec(), p, &format!("{prefix}.qkv"));
    let qkv = conv_named(&qkv, &cfg.qkv_dw_spec(), p, &format!("{prefix}.qkv_dw"));
    let log_t = p
        .get(&format!("{prefix}.log_temp"))
        .unwrap()
        .data()
        .to_vec();

    let row = |n: usize, part: usize, ch_idx: usize| -> Vec<f64> {
        let base = qkv.shape().offset(n, part * c + ch_idx, 0, 0);
        qkv.data()[base..base + hw].to_vec()
    };
    let unit = |v: Vec<f64>| -> Vec<f64> {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|a| a / norm).collect()
    };

    let mut attended = Tensor::zeros(xs);
    let mut attn_all = Vec::new();
    for n in 0..xs.n {
        for h in 0..heads {
            let q: Vec<Vec<f64>> = (0..ch).map(|i| unit(row(n, 0, h * ch + i))).collect();
            let k: Vec<Vec<f64>> = (0..ch).map(|i| unit(row(n, 1, h * ch + i))).collect();
            let v: Vec<Vec<f64>> = (0..ch).map(|i| row(n, 2, h * ch + i)).collect();
            let scale = (-log_t[h]).exp();
            let mut attn = vec![0.0; ch * ch];
            for i in 0..ch {
                let s: Vec<f64> = (0..ch)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..ch {
                    attn[i * ch + j] = e[j] / z;
                }
            }
            for i in 0..ch {
                let base = xs.offset(n, h * ch + i, 0, 0);
                for pix in 0..hw {
                    let acc: f64 = (0..ch).map(|j| attn[i * ch + j] * v[j][pix]).sum();
                    attended.data_mut()[base + pix] = acc;
                }
            }
            attn_all.push(attn);
        }
    }
    let proj = conv_named(&attended, &cfg.out_spec(), p, &format!("{prefix}.out"));
    let out = Tensor::from_vec(
        xs,
        proj.data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a + b)
            .collect(),
    )
    .unwrap();
    (out, attn_all)
}

/// Selective-kernel block recomposed from its definition: depthwise cascade,
/// per-branch 1x1 mixes, channel mean/max pooling, mask conv + sigmoid,
/// mask-weighted sum, output 1x1, multiplicative gate on the input.
pub fn lsk_ref(x: &Tensor, p: &ParamStore, prefix: &str, cfg: &LskConfig) -> Tensor {
    let xs = x.shape();
    let nb = cfg.branches.len();
    let mut taps = Vec::with_capacity(nb);
    let mut cascade = x.clone();
    for i in 0..nb {
        cascade = conv_named(
            &cascade,
            &cfg.depthwise_spec(i),
            p,
            &format!("{prefix}.dw{i}"),
        );
        taps.push(conv_named(
            &cascade,
            &cfg.mix_spec(),
            p,
            &format!("{prefix}.mix{i}"),
        ));
    }
    let total_c = nb * xs.c;
    let mut desc = Tensor::zeros(Shape::new(xs.n, 2, xs.h, xs.w).unwrap());
    for n in 0..xs.n {
        for y in 0..xs.h {
            for xx in 0..xs.w {
                let vals: Vec<f64> = (0..total_c)
                    .map(|cc| taps[cc / xs.c].at(n, cc % xs.c, y, xx))
                    .collect();
                let mean = vals.iter().sum::<f64>() / total_c as f64;
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s = desc.shape();
                desc.data_mut()[s.offset(n, 0, y, xx)] = mean;
                desc.data_mut()[s.offset(n, 1, y, xx)] = max;
            }
        }
    }
    let logits = conv_named(&desc, &cfg.mask_spec(), p, &format!("{prefix}.mask"));
    let mut selected = Tensor::zeros(xs);
    for n in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..xs.h {
                for xx in 0..xs.w {
                    let v: f64 = (0..nb)
                        .map(|i| sigmoid(logits.at(n, i, y, xx)) * taps[i].at(n, c, y, xx))
                        .sum();
                    selected.data_mut()[xs.offset(n, c, y, xx)] = v;
                }
            }
        }
    }
    let s = conv_named(&selected, &cfg.mix_spec(), p, &format!("{prefix}.out"));
    Tensor::from_vec(
        xs,
        x.data().iter().zip(s.data()).map(|(a, b)| a * b).collect(),
    )
    .unwrap()
}

pub fn rf_formula(branches: &[Branch]) -> usize {
    1 + branches
        .iter()
        .map(|b| b.dilation * (b.kernel - 1))
        .sum::<usize>()
}

/// Learnable scalar count of the whole network, from layer arithmetic alone.
pub fn closed_form_params(cfg: &NetworkConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize, bias: bool| {
        cin * cout * k * k + if bias { cout } else { 0 }
    };
    let bn = |c: usize| 2 * c;
    let w = &cfg.stage_channels;
    let mut total = conv(cfg.in_channels, w[0], 3, false) + bn(w[0]);
    let mut cin = w[0];
    for &cout in w {
        for b in 0..cfg.blocks_per_stage {
            total += conv(cin, cout, 3, false) + bn(cout) + conv(cout, cout, 3, false) + bn(cout);
            if b == 0 {
                total += conv(cin, cout, 1, false) + bn(cout);
            }
            cin = cout;
        }
    }
    let d = cfg.decoder_channels;
    total += w.iter().map(|&c| conv(c, d, 1, true)).sum::<usize>();
    let attention = conv(d, 3 * d, 1, true) + (3 * d * 9 + 3 * d) + conv(d, d, 1, true) + cfg.heads;
    let nb = cfg.lsk_branches.len();
    let selective = cfg
        .lsk_branches
        .iter()
        .map(|b| d * b.kernel * b.kernel + conv(d, d, 1, true))
        .sum::<usize>()
        + conv(2, nb, cfg.mask_kernel, true)
        + conv(d, d, 1, true);
    total += 3 * (attention + selective + 1);
    total += conv(d, cfg.num_classes, 3, true) + conv(d, cfg.num_classes, 1, true);
    total
}
