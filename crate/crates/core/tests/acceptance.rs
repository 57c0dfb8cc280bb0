//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! Runs without the libtest harness so the lines come out in order and
//! unbuffered. Criterion 8 trains the full default configuration and takes a
//! few minutes.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::*;
use lsksa::gradcheck::{FdOptions, GradCheckRegistry};
use lsksa::harness::{train, RunConfig};
use lsksa::lsk::{measure_impulse_support, Branch, BranchList, LskConfig};
use lsksa::network::{af_fuse_forward, NetworkConfig};
use lsksa::nn::{conv2d_forward, ConvSpec};
use lsksa::params::Initializer;
use lsksa::tksa::{tksa_forward_traced, topk_mask_matrix, KeepRatio, TksaConfig, TksaParams};
use lsksa::{ParamStore, Shape, Tape, Tensor};
use rand::Rng;

const GRAD_TOLERANCE: f64 = 1e-6;
const GRAD_EPS: f64 = 1e-5;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(5 * 60);
const TOPK_MATRICES: usize = 1000;
const DENSE_TRIALS: u64 = 20;
const DENSE_TOLERANCE: f64 = 1e-12;
const DEFAULT_SUPPORT: usize = 23;
const RF_LISTS: usize = 10;
const ROW_SUM_TOLERANCE: f64 = 1e-12;
const FUSE_SATURATION: f64 = 30.0;
const FUSE_TOLERANCE: f64 = 1e-12;
const MIOU_TARGET: f64 = 0.80;
const OA_TARGET: f64 = 0.90;
/// Held-out mIoU reached by the calibration run of configs/default.cfg,
/// minus 0.05.
const MIOU_CALIBRATED: f64 = 0.9243 - 0.05;
const EARLY_LOSS_STEP: usize = 50;
const TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const PAPER_PARAMS: f64 = 12.0e6;
const PARAM_BAND: f64 = 0.10;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn workspace_root() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .unwrap()
        .parent()
        .unwrap()
}

fn lsksa(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lsksa"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`lsksa {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let registry = GradCheckRegistry::with_builtin();
    let opts = FdOptions {
        eps: GRAD_EPS,
        ..FdOptions::default()
    };
    let mut worst = (0.0f64, "");
    let mut failed = Vec::new();
    for check in registry.select("all").map_err(|e| e.to_string())? {
        let r = check
            .run(&opts)
            .map_err(|e| format!("{}: {e}", check.name()))?;
        if !r.passes(GRAD_TOLERANCE) {
            failed.push(format!("{} {:.2e}", check.name(), r.max_rel_error));
        }
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, check.name());
        }
    }
    let elapsed = t0.elapsed();
    ensure(failed.is_empty(), || {
        format!("over {GRAD_TOLERANCE:e}: {}", failed.join(", "))
    })?;
    ensure(elapsed <= GRADCHECK_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "max relative error {:.2e} ({}) in {:.1}s",
        worst.0,
        worst.1,
        elapsed.as_secs_f64()
    ))
}

fn topk_oracle() -> Outcome {
    let cases: Vec<(usize, usize)> = [2, 4, 8, 16]
        .iter()
        .flat_map(|&c| (1..=c).map(move |k| (c, k)))
        .collect();
    let mut r = rng(21);
    for trial in 0..TOPK_MATRICES {
        let (c_hat, k) = cases[trial % cases.len()];
        // every fourth matrix comes from a four-value alphabet to force ties
        let scores: Vec<f64> = (0..c_hat * c_hat)
            .map(|_| {
                if trial % 4 == 3 {
                    r.gen_range(0..4) as f64
                } else {
                    r.gen_range(-1.0..1.0)
                }
            })
            .collect();
        let m = Tensor::from_dims([1, 1, c_hat, c_hat], scores.clone()).unwrap();
        let masked = topk_mask_matrix(&m, k).map_err(|e| e.to_string())?;
        for row in 0..c_hat {
            let got: BTreeSet<usize> = (0..c_hat)
                .filter(|&j| masked.data()[row * c_hat + j] != f64::NEG_INFINITY)
                .collect();
            let want = sort_topk(&scores[row * c_hat..(row + 1) * c_hat], k);
            ensure(got == want, || {
                format!("matrix {trial} row {row}: {got:?} vs {want:?}")
            })?;
        }
    }
    Ok(format!(
        "{TOPK_MATRICES} matrices over {} (size, k) pairs agree",
        cases.len()
    ))
}

fn attention_params(cfg: &TksaConfig, seed: u64) -> ParamStore {
    let mut init = Initializer::new(seed);
    TksaParams::init(&mut init, "a", cfg).unwrap();
    let (mut params, _) = init.finish();
    let mut r = rng(seed + 1);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".b") || name.ends_with("log_temp") {
            *t = uniform(t.shape(), -0.5, 0.5, &mut r);
        }
    }
    params
}

fn run_attention(x: &Tensor, params: &ParamStore, cfg: &TksaConfig) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.constant(x.clone());
    let p = TksaParams::bind(&vars, "a").unwrap();
    let out = tksa_forward_traced(&mut tape, xv, &p, cfg).unwrap();
    (
        tape.value(out.output).clone(),
        tape.value(out.attention).clone(),
    )
}

fn dense_limit() -> Outcome {
    let mut cfg = TksaConfig::new(16);
    cfg.k_ratios = vec![KeepRatio::new(1, 1); cfg.heads];
    let mut worst: f64 = 0.0;
    for trial in 0..DENSE_TRIALS {
        let params = attention_params(&cfg, 100 + trial);
        let x = uniform(
            Shape::new(2, 16, 6, 5).unwrap(),
            -1.0,
            1.0,
            &mut rng(200 + trial),
        );
        let (got, _) = run_attention(&x, &params, &cfg);
        let (want, _) = dense_attention_ref(&x, &params, "a", &cfg);
        worst = worst.max(got.max_abs_diff(&want));
    }
    ensure(worst <= DENSE_TOLERANCE, || {
        format!("max abs diff {worst:e}")
    })?;
    Ok(format!("{DENSE_TRIALS} inputs, max abs diff {worst:.2e}"))
}

fn receptive_field() -> Outcome {
    let default = LskConfig::new(1);
    let support = measure_impulse_support(&default.branches, 1).map_err(|e| e.to_string())?;
    ensure(support == (DEFAULT_SUPPORT, DEFAULT_SUPPORT), || {
        format!("impulse support {support:?}")
    })?;
    let mut r = rng(5);
    for _ in 0..RF_LISTS {
        let mut d = 0;
        let branches: Vec<Branch> = (0..r.gen_range(1..=4))
            .map(|_| {
                d += r.gen_range(1..=4);
                Branch {
                    kernel: 2 * r.gen_range(1..=4) + 1,
                    dilation: d,
                }
            })
            .collect();
        let arg = BranchList(branches.clone()).to_string();
        let printed = lsksa(&["rf", "--branches", &arg])?;
        let want = rf_formula(&branches);
        ensure(printed.trim() == want.to_string(), || {
            format!("rf {arg}: printed {} want {want}", printed.trim())
        })?;
    }
    Ok(format!(
        "impulse support {DEFAULT_SUPPORT}x{DEFAULT_SUPPORT}; rf CLI matches on {RF_LISTS} lists"
    ))
}

fn conv_oracle() -> Outcome {
    let mut r = rng(11);
    let c = 4;
    let mut cases = 0;
    for k in [1, 3, 5, 7] {
        for d in [1, 2, 3] {
            for groups in [1, c] {
                for stride in [1, 2] {
                    for same in [true, false] {
                        let spec = ConvSpec {
                            in_channels: c,
                            out_channels: c,
                            kernel: (k, k),
                            stride,
                            dilation: d,
                            groups,
                            padding: if same { d * (k - 1) / 2 } else { 0 },
                            has_bias: (k + d) % 2 == 0,
                        };
                        let x = uniform(Shape::new(2, c, 20, 20).unwrap(), -1.0, 1.0, &mut r);
                        let w = uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
                        let b = uniform(spec.bias_shape(), -1.0, 1.0, &mut r);
                        let b = spec.has_bias.then_some(&b);
                        let got = conv2d_forward(&x, &spec, &w, b).map_err(|e| e.to_string())?;
                        ensure(got.bit_eq(&conv_ref(&x, &spec, &w, b)), || {
                            format!("mismatch for {spec:?}")
                        })?;
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{cases} shapes bitwise equal"))
}

fn row_stochastic() -> Outcome {
    let cfg = TksaConfig::new(32);
    let c_hat = cfg.head_channels();
    let keep = cfg.keep_counts();
    let mut rows = 0;
    for trial in 0..10 {
        let params = attention_params(&cfg, 300 + trial);
        let x = uniform(
            Shape::new(2, 32, 4, 4).unwrap(),
            -1.0,
            1.0,
            &mut rng(400 + trial),
        );
        let (_, attn) = run_attention(&x, &params, &cfg);
        for n in 0..2 {
            for (head, &k) in keep.iter().enumerate() {
                for row in 0..c_hat {
                    let base = attn.shape().offset(n, head, row, 0);
                    let vals = &attn.data()[base..base + c_hat];
                    let sum: f64 = vals.iter().sum();
                    let zeros = vals.iter().filter(|&&v| v == 0.0).count();
                    ensure((sum - 1.0).abs() <= ROW_SUM_TOLERANCE, || {
                        format!("head {head} row {row} sums to {sum}")
                    })?;
                    ensure(zeros == c_hat - k, || {
                        format!("head {head} row {row}: {zeros} zeros, want {}", c_hat - k)
                    })?;
                    rows += 1;
                }
            }
        }
    }
    Ok(format!("{rows} rows, keep counts {keep:?} of {c_hat}"))
}

fn fusion_boundaries() -> Outcome {
    let mut r = rng(31);
    let shape = Shape::new(2, 3, 5, 5).unwrap();
    let ef = uniform(shape, -1.0, 1.0, &mut r);
    let df = uniform(shape, -1.0, 1.0, &mut r);
    let fuse = |logit| af_fuse_forward(&ef, &df, logit).map_err(|e| e.to_string());
    let hi = fuse(FUSE_SATURATION)?.max_abs_diff(&ef);
    let lo = fuse(-FUSE_SATURATION)?.max_abs_diff(&df);
    ensure(hi <= FUSE_TOLERANCE && lo <= FUSE_TOLERANCE, || {
        format!("saturation error {hi:e} / {lo:e}")
    })?;
    let mid = fuse(0.0)?;
    let mean = Tensor::from_vec(
        shape,
        ef.data()
            .iter()
            .zip(df.data())
            .map(|(a, b)| (a + b) / 2.0)
            .collect(),
    )
    .unwrap();
    ensure(mid.bit_eq(&mean), || {
        "logit 0 is not exactly the mean".into()
    })?;
    Ok(format!("+30 err {hi:.1e}, -30 err {lo:.1e}, 0 exact mean"))
}

fn synthetic_training() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::load(&workspace_root().join("configs/default.cfg"))
        .map_err(|e| e.to_string())?;
    cfg.out_dir = dir.path().to_path_buf();
    let t0 = Instant::now();
    let out = train(&cfg, None, &mut |line: &str| {
        if line.starts_with("eval") {
            eprintln!("  {line}");
        }
    })
    .map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let last = out.last();
    let early = out
        .records
        .iter()
        .find(|r| r.step == EARLY_LOSS_STEP)
        .ok_or("no evaluation at step 50")?;
    let early_cap = 0.5 * (4f64).ln();
    let floor = MIOU_TARGET.max(MIOU_CALIBRATED);
    let detail = format!(
        "mIoU {:.4} (floor {floor:.2}), OA {:.4}, step-{EARLY_LOSS_STEP} held-out loss {:.4} (cap {early_cap:.4}), {:.0}s",
        last.miou,
        last.oa,
        early.loss,
        elapsed.as_secs_f64()
    );
    ensure(
        last.miou >= floor
            && last.oa >= OA_TARGET
            && early.loss <= early_cap
            && elapsed <= TRAIN_BUDGET,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn short_run_config(out_dir: &Path, steps: usize) -> String {
    format!(
        "image_size = 32\ntrain_images = 32\neval_images = 16\nbatch_size = 4\nsteps = {steps}\n\
         eval_interval = 5\nstage_channels = 8,8,16,16\nblocks_per_stage = 1\n\
         decoder_channels = 8\nout_dir = {}\n",
        out_dir.display()
    )
}

const RUN_FILES: [&str; 3] = ["metrics.jsonl", "final.ckpt", "best.ckpt"];

fn snapshot(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    RUN_FILES
        .iter()
        .map(|f| fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

fn compare(a: &[Vec<u8>], b: &[Vec<u8>], what: &str) -> Result<(), String> {
    for (name, (x, y)) in RUN_FILES.iter().zip(a.iter().zip(b)) {
        ensure(x == y, || format!("{what}: {name} differs"))?;
    }
    Ok(())
}

fn determinism() -> Outcome {
    const STEPS: usize = 20;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    // every run writes to the same directory so the embedded configs match
    let run = tmp.path().join("run");
    let full = tmp.path().join("full.cfg");
    let half = tmp.path().join("half.cfg");
    fs::write(&full, short_run_config(&run, STEPS)).map_err(|e| e.to_string())?;
    fs::write(&half, short_run_config(&run, STEPS / 2)).map_err(|e| e.to_string())?;
    let (full, half) = (full.to_str().unwrap(), half.to_str().unwrap());

    lsksa(&["train", "--config", full])?;
    let first = snapshot(&run)?;
    fs::remove_dir_all(&run).map_err(|e| e.to_string())?;
    lsksa(&["train", "--config", full])?;
    compare(&first, &snapshot(&run)?, "repeat run")?;

    fs::remove_dir_all(&run).map_err(|e| e.to_string())?;
    lsksa(&["train", "--config", half])?;
    let ckpt = run.join("final.ckpt");
    lsksa(&[
        "train",
        "--config",
        full,
        "--resume",
        ckpt.to_str().unwrap(),
    ])?;
    compare(&first, &snapshot(&run)?, "resumed run")?;
    Ok(format!(
        "repeat and resume-at-step-{} runs byte-identical over {STEPS} steps",
        STEPS / 2
    ))
}

fn params_total(cfg_text: &str, dir: &Path, name: &str) -> Result<usize, String> {
    let path = dir.join(name);
    fs::write(&path, cfg_text).map_err(|e| e.to_string())?;
    let out = lsksa(&["--json", "params", "--config", path.to_str().unwrap()])?;
    let v: serde_json::Value = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    v["total"]
        .as_u64()
        .map(|t| t as usize)
        .ok_or_else(|| "no total in params output".into())
}

fn parameter_accounting() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let toy = NetworkConfig::reduced();
    let toy_text = format!(
        "num_classes = {}\nstage_channels = 4,4,8,8\nblocks_per_stage = {}\ndecoder_channels = {}\n",
        toy.num_classes, toy.blocks_per_stage, toy.decoder_channels
    );
    let got = params_total(&toy_text, tmp.path(), "toy.cfg")?;
    let want = closed_form_params(&toy);
    ensure(got == want, || {
        format!("toy config: printed {got}, closed form {want}")
    })?;

    let full_text = fs::read_to_string(workspace_root().join("configs/full_scale.cfg"))
        .map_err(|e| e.to_string())?;
    let full = params_total(&full_text, tmp.path(), "full.cfg")?;
    let rel = (full as f64 - PAPER_PARAMS) / PAPER_PARAMS;
    ensure(rel.abs() <= PARAM_BAND, || {
        format!("full scale {full} is {:+.1}% off", rel * 100.0)
    })?;
    Ok(format!(
        "toy {got} = closed form; full scale {full} ({:+.1}% vs 12.0M)",
        rel * 100.0
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("top-k oracle", topk_oracle),
        ("dense limit", dense_limit),
        ("receptive field", receptive_field),
        ("convolution oracle", conv_oracle),
        ("row-stochastic sparsity", row_stochastic),
        ("fusion boundaries", fusion_boundaries),
        ("synthetic training", synthetic_training),
        ("determinism", determinism),
        ("parameter accounting", parameter_accounting),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} ({name}): PASS - {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {} ({name}): FAIL - {detail}", i + 1);
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
