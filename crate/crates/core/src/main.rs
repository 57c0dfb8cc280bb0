use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use lsksa::gradcheck::{FdOptions, GradCheckRegistry, TOLERANCE};
use lsksa::harness::{self, Checkpoint, Dataset, RunConfig, SynthConfig};
use lsksa::lsk::{receptive_field, validate_branches, BranchList, LskConfig};
use lsksa::network::{init_params, param_count};
use lsksa::Error;

#[derive(Parser)]
#[command(
    name = "lsksa",
    version,
    about = "Selective-kernel / sparse-attention segmentation toolkit"
)]
struct Cli {
    /// Emit machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic data as the config file describes.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// `all`, a group (ops, lsk, tksa, model) or a single check name.
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Receptive field of a decomposed-kernel cascade.
    Rf {
        /// Comma-separated `kernel:dilation` pairs, e.g. "5:1,7:3".
        #[arg(long)]
        branches: String,
    },
    /// Write a synthetic dataset to disk.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Count the learnable parameters of the configured network.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Failure categories that map onto exit codes.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn cmd_train(config: &Path, resume: Option<&Path>, as_json: bool) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let started = Instant::now();
    let mut progress = |line: &str| {
        if !as_json {
            println!("{line}");
        }
    };
    let outcome = harness::train(&cfg, resume, &mut progress)?;
    if as_json {
        print_json(outcome.last());
    } else {
        let last = outcome.last();
        println!(
            "finished step {} in {:.1}s: held-out miou {:.4} oa {:.4} mean_f1 {:.4}; outputs in {}",
            last.step,
            started.elapsed().as_secs_f64(),
            last.miou,
            last.oa,
            last.mean_f1,
            outcome.out_dir.display()
        );
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, as_json: bool) -> CmdResult {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = RunConfig::from_text(&ckpt.config_text)?;
    let ds = Dataset::read(data)?;
    if ds.num_classes != cfg.network.num_classes {
        return Err(Failure::Validation(format!(
            "dataset has {} classes, checkpoint expects {}",
            ds.num_classes, cfg.network.num_classes
        )));
    }
    let report = harness::evaluate(&ckpt.params, &ckpt.buffers, &cfg.network, &ds.samples)?;
    let rec = report.record(ckpt.step as usize, &cfg.digest());
    if as_json {
        print_json(&rec);
    } else {
        println!(
            "step {} images {} loss {:.6} oa {:.4} miou {:.4} mean_f1 {:.4}",
            rec.step,
            ds.samples.len(),
            rec.loss,
            rec.oa,
            rec.miou,
            rec.mean_f1
        );
        for c in &rec.per_class {
            println!("  class {} iou {:.4} f1 {:.4}", c.class, c.iou, c.f1);
        }
    }
    Ok(())
}

fn cmd_gradcheck(module: &str, as_json: bool) -> CmdResult {
    let registry = GradCheckRegistry::with_builtin();
    let checks = registry.select(module)?;
    let opts = FdOptions::default();
    let mut worst: f64 = 0.0;
    let mut all_pass = true;
    let mut rows = Vec::new();
    for check in checks {
        let t0 = Instant::now();
        let r = check.run(&opts)?;
        let pass = r.passes(TOLERANCE);
        all_pass &= pass;
        worst = worst.max(r.max_rel_error);
        if !as_json {
            println!(
                "{:<14} max_rel_error {:.3e} checked {:>5} skipped {:>3} {:>6.2}s {}",
                check.name(),
                r.max_rel_error,
                r.checked,
                r.skipped,
                t0.elapsed().as_secs_f64(),
                if pass { "PASS" } else { "FAIL" }
            );
        }
        rows.push(json!({
            "name": check.name(),
            "group": check.group(),
            "max_rel_error": r.max_rel_error,
            "checked": r.checked,
            "skipped": r.skipped,
            "pass": pass,
        }));
    }
    let verdict = if all_pass { "PASS" } else { "FAIL" };
    if as_json {
        print_json(&json!({
            "module": module,
            "eps": opts.eps,
            "tolerance": TOLERANCE,
            "max_rel_error": worst,
            "pass": all_pass,
            "checks": rows,
        }));
    } else {
        println!("max relative error {worst:.3e} {verdict}");
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient check exceeded tolerance {TOLERANCE:e}"
        )))
    }
}

fn cmd_rf(branches: &str, as_json: bool) -> CmdResult {
    let list: BranchList = branches.parse()?;
    validate_branches(&list.0)?;
    let rf = receptive_field(&LskConfig {
        branches: list.0.clone(),
        ..LskConfig::new(1)
    });
    if as_json {
        print_json(&json!({ "branches": list.to_string(), "receptive_field": rf }));
    } else {
        println!("{rf}");
    }
    Ok(())
}

fn cmd_gen_data(config: &Path, as_json: bool) -> CmdResult {
    let cfg = SynthConfig::load(config)?;
    let samples = harness::generate_dataset(&cfg)?;
    let ds = Dataset {
        seed: cfg.seed,
        size: cfg.size,
        num_classes: cfg.num_classes,
        samples,
    };
    ds.write(&cfg.out_dir)?;
    let hist = harness::synth::class_histogram(&ds.samples, cfg.num_classes);
    let total: u64 = hist.iter().sum();
    let freq: Vec<f64> = hist.iter().map(|&h| h as f64 / total as f64).collect();
    if as_json {
        print_json(&json!({
            "out_dir": cfg.out_dir.display().to_string(),
            "images": ds.samples.len(),
            "class_frequency": freq,
        }));
    } else {
        println!(
            "wrote {} images to {}",
            ds.samples.len(),
            cfg.out_dir.display()
        );
        for (c, f) in freq.iter().enumerate() {
            println!("  class {c}: {:.2}% of pixels", 100.0 * f);
        }
    }
    Ok(())
}

fn cmd_params(config: &Path, as_json: bool) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let (params, _) = init_params(&cfg.network, cfg.seed)?;
    let count = param_count(&params);
    if as_json {
        print_json(&count);
    } else {
        println!("total {} ({:.3}M)", count.total, count.millions());
        for (module, n) in &count.per_module {
            println!("  {module:<12} {n}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let j = cli.json;
    let result = match &cli.command {
        Command::Train { config, resume } => cmd_train(config, resume.as_deref(), j),
        Command::Eval { checkpoint, data } => cmd_eval(checkpoint, data, j),
        Command::Gradcheck { module } => cmd_gradcheck(module, j),
        Command::Rf { branches } => cmd_rf(branches, j),
        Command::GenData { config } => cmd_gen_data(config, j),
        Command::Params { config } => cmd_params(config, j),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
