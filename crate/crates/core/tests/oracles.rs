mod common;

use common::*;
use lsksa::lsk::{
    lsk_forward_traced, measure_impulse_support, receptive_field, Branch, LskConfig, LskParams,
};
use lsksa::nn::{conv2d_forward, ConvSpec};
use lsksa::params::Initializer;
use lsksa::tksa::{tksa_forward_traced, topk_mask_matrix, KeepRatio, TksaConfig, TksaParams};
use lsksa::{Shape, Tape, Tensor};
use rand::Rng;

#[test]
fn conv_matches_brute_force_bitwise_on_grid() {
    let mut r = rng(11);
    let c = 4;
    let mut cases = 0;
    for k in [1, 3, 5, 7] {
        for d in [1, 2, 3] {
            for groups in [1, c] {
                for stride in [1, 2] {
                    for same in [true, false] {
                        let padding = if same { d * (k - 1) / 2 } else { 0 };
                        let spec = ConvSpec {
                            in_channels: c,
                            out_channels: c,
                            kernel: (k, k),
                            stride,
                            dilation: d,
                            groups,
                            padding,
                            has_bias: (k + d) % 2 == 0,
                        };
                        let x = uniform(Shape::new(2, c, 20, 20).unwrap(), -1.0, 1.0, &mut r);
                        let w = uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
                        let b = uniform(spec.bias_shape(), -1.0, 1.0, &mut r);
                        let b = spec.has_bias.then_some(&b);
                        let got = conv2d_forward(&x, &spec, &w, b).unwrap();
                        let want = conv_ref(&x, &spec, &w, b);
                        assert!(got.bit_eq(&want), "mismatch for {spec:?}");
                        cases += 1;
                    }
                }
            }
        }
    }
    assert_eq!(cases, 96);
}

#[test]
fn conv_rectangular_and_grouped_channels() {
    let mut r = rng(12);
    let spec = ConvSpec {
        in_channels: 6,
        out_channels: 4,
        kernel: (3, 5),
        stride: 1,
        dilation: 2,
        groups: 2,
        padding: 3,
        has_bias: true,
    };
    let x = uniform(Shape::new(1, 6, 9, 13).unwrap(), -2.0, 2.0, &mut r);
    let w = uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
    let b = uniform(spec.bias_shape(), -1.0, 1.0, &mut r);
    let got = conv2d_forward(&x, &spec, &w, Some(&b)).unwrap();
    assert!(got.bit_eq(&conv_ref(&x, &spec, &w, Some(&b))));
}

#[test]
fn topk_matches_sort_oracle_on_1000_matrices() {
    let mut r = rng(21);
    let mut checked = 0;
    for trial in 0..1000 {
        let c_hat = [2, 4, 8, 16][trial % 4];
        let k = 1 + trial / 4 % c_hat;
        // a quarter of the matrices are drawn from a small value set to force ties
        let scores: Vec<f64> = if trial % 4 == 3 {
            (0..c_hat * c_hat)
                .map(|_| r.gen_range(0..4) as f64)
                .collect()
        } else {
            (0..c_hat * c_hat).map(|_| r.gen_range(-1.0..1.0)).collect()
        };
        let m = Tensor::from_dims([1, 1, c_hat, c_hat], scores.clone()).unwrap();
        let masked = topk_mask_matrix(&m, k).unwrap();
        for row in 0..c_hat {
            let slice = &scores[row * c_hat..(row + 1) * c_hat];
            let survivors: std::collections::BTreeSet<usize> = (0..c_hat)
                .filter(|&j| masked.data()[row * c_hat + j] != f64::NEG_INFINITY)
                .collect();
            assert_eq!(survivors, sort_topk(slice, k), "trial {trial} row {row}");
        }
        checked += 1;
    }
    assert_eq!(checked, 1000);
}

fn tksa_setup(
    channels: usize,
    heads: usize,
    dense: bool,
    seed: u64,
) -> (TksaConfig, lsksa::ParamStore) {
    let mut cfg = TksaConfig::new(channels);
    cfg.heads = heads;
    if dense {
        cfg.k_ratios = vec![KeepRatio::new(1, 1); heads];
    } else {
        cfg.k_ratios.truncate(heads);
        while cfg.k_ratios.len() < heads {
            cfg.k_ratios.push(KeepRatio::new(1, 2));
        }
    }
    let mut init = Initializer::new(seed);
    TksaParams::init(&mut init, "a", &cfg).unwrap();
    let (mut params, _) = init.finish();
    // nonzero biases and temperatures so every parameter matters
    let mut r = rng(seed + 1);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".b") || name.ends_with("log_temp") {
            *t = uniform(t.shape(), -0.5, 0.5, &mut r);
        }
    }
    (cfg, params)
}

#[test]
fn dense_limit_matches_unmasked_reference() {
    for trial in 0..20 {
        let (cfg, params) = tksa_setup(16, 4, true, 100 + trial);
        let mut r = rng(200 + trial);
        let x = uniform(Shape::new(2, 16, 6, 5).unwrap(), -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(x.clone());
        let p = TksaParams::bind(&vars, "a").unwrap();
        let out = tksa_forward_traced(&mut tape, xv, &p, &cfg).unwrap();
        let (want, _) = dense_attention_ref(&x, &params, "a", &cfg);
        let diff = tape.value(out.output).max_abs_diff(&want);
        assert!(diff <= 1e-12, "trial {trial}: {diff:e}");
    }
}

#[test]
fn sparse_attention_rows_are_stochastic_with_exact_support() {
    for trial in 0..10 {
        let (cfg, params) = tksa_setup(32, 4, false, 300 + trial);
        let mut r = rng(400 + trial);
        let x = uniform(Shape::new(1, 32, 4, 4).unwrap(), -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(x);
        let p = TksaParams::bind(&vars, "a").unwrap();
        let out = tksa_forward_traced(&mut tape, xv, &p, &cfg).unwrap();
        let attn = tape.value(out.attention);
        let c_hat = cfg.head_channels();
        for (head, &k) in cfg.keep_counts().iter().enumerate() {
            for row in 0..c_hat {
                let base = attn.shape().offset(0, head, row, 0);
                let vals = &attn.data()[base..base + c_hat];
                let sum: f64 = vals.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
                assert_eq!(vals.iter().filter(|&&v| v == 0.0).count(), c_hat - k);
            }
        }
    }
}

#[test]
fn lsk_matches_compositional_reference() {
    let configs = [
        LskConfig::new(4),
        LskConfig::with_branches(
            3,
            vec![Branch {
                kernel: 3,
                dilation: 1,
            }],
        ),
        LskConfig::with_branches(
            2,
            vec![
                Branch {
                    kernel: 3,
                    dilation: 1,
                },
                Branch {
                    kernel: 3,
                    dilation: 2,
                },
                Branch {
                    kernel: 5,
                    dilation: 3,
                },
            ],
        ),
    ];
    for (i, cfg) in configs.iter().enumerate() {
        let mut init = Initializer::new(50 + i as u64);
        LskParams::init(&mut init, "s", cfg).unwrap();
        let (mut params, _) = init.finish();
        let mut r = rng(60 + i as u64);
        for (name, t) in params.iter_mut() {
            if name.ends_with(".b") {
                *t = uniform(t.shape(), -0.3, 0.3, &mut r);
            }
        }
        let x = uniform(
            Shape::new(2, cfg.channels, 12, 11).unwrap(),
            -1.0,
            1.0,
            &mut r,
        );
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(x.clone());
        let p = LskParams::bind(&vars, "s", cfg).unwrap();
        let out = lsk_forward_traced(&mut tape, xv, &p, cfg).unwrap();
        let diff = tape
            .value(out.output)
            .max_abs_diff(&lsk_ref(&x, &params, "s", cfg));
        assert!(diff <= 1e-12, "config {i}: {diff:e}");
        let masks = tape.value(out.masks);
        assert!(masks.data().iter().all(|&m| m > 0.0 && m < 1.0));
    }
}

#[test]
fn impulse_support_equals_formula() {
    let default = LskConfig::new(1);
    assert_eq!(
        measure_impulse_support(&default.branches, 1).unwrap(),
        (23, 23)
    );
    assert_eq!(receptive_field(&default), 23);
    let mut r = rng(70);
    for _ in 0..20 {
        let n = r.gen_range(1..=3);
        let mut d = 0;
        let branches: Vec<Branch> = (0..n)
            .map(|_| {
                d += r.gen_range(1..=3);
                Branch {
                    kernel: 2 * r.gen_range(0..=3) + 1,
                    dilation: d,
                }
            })
            .collect();
        let want = rf_formula(&branches);
        assert_eq!(
            receptive_field(&LskConfig::with_branches(1, branches.clone())),
            want
        );
        assert_eq!(measure_impulse_support(&branches, 3).unwrap(), (want, want));
    }
}
