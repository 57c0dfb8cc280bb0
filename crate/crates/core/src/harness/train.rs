//! SGD training loop with held-out evaluation, checkpoints and resumption.
//!
//! Batch `t` is a pure function of `(seed, t)`: the training indices are
//! shuffled once per epoch with a generator seeded by `(seed, epoch)`, and the
//! batches tile that sequence. Together with momentum buffers stored in the
//! checkpoint this makes a resumed run indistinguishable from an uninterrupted
//! one.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::eval::{evaluate, stack, MetricsRecord};
use super::synth::{generate_range, Sample};
use crate::error::{Error, Result};
use crate::network::{forward, init_params, segmentation_loss, ForwardCtx};
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const TRAIN_LOG: &str = "train.log";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Model, optimizer state and progress of a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore,
    pub buffers: ParamStore,
    pub momentum: ParamStore,
    pub step: usize,
    pub best_miou: f64,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let (params, buffers) = init_params(&cfg.network, cfg.seed)?;
        let mut momentum = params.clone();
        for (_, t) in momentum.iter_mut() {
            *t = t.map(|_| 0.0);
        }
        Ok(TrainState {
            params,
            buffers,
            momentum,
            step: 0,
            best_miou: f64::NEG_INFINITY,
        })
    }

    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            config_text: cfg.to_text(),
            step: self.step as u64,
            best_miou: self.best_miou,
            params: self.params.clone(),
            buffers: self.buffers.clone(),
            momentum: self.momentum.clone(),
        }
    }

    /// Restores a checkpoint written by a run with the same trajectory.
    pub fn from_checkpoint(ckpt: Checkpoint, cfg: &RunConfig) -> Result<Self> {
        let written_by = RunConfig::from_text(&ckpt.config_text)?;
        if written_by.trajectory() != cfg.trajectory() {
            return Err(Error::config(
                "checkpoint was written under a different run configuration \
                 (only `steps` and `out_dir` may change on resume)",
            ));
        }
        let step = ckpt.step as usize;
        if step > cfg.steps {
            return Err(Error::config(format!(
                "checkpoint is at step {step}, past the configured {} steps",
                cfg.steps
            )));
        }
        Ok(TrainState {
            params: ckpt.params,
            buffers: ckpt.buffers,
            momentum: ckpt.momentum,
            step,
            best_miou: ckpt.best_miou,
        })
    }
}

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub main: f64,
    pub aux: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mixed = seed.wrapping_mul(0xA076_1D64_78BD_642F) ^ (epoch as u64).wrapping_add(0x5851_F42D);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(mixed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Training indices of batch `step`.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let start = step * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (start..start + batch)
        .map(|p| {
            let epoch = p / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, epoch_order(seed, epoch, n)));
            }
            cached.as_ref().unwrap().1[p % n]
        })
        .collect()
}

/// One forward/backward pass and momentum-SGD update on `batch`.
pub fn sgd_step(state: &mut TrainState, cfg: &RunConfig, batch: &[&Sample]) -> Result<StepLoss> {
    let (images, labels) = stack(batch)?;
    let mut tape = Tape::new();
    let vars = state.params.register(&mut tape);
    let x = tape.constant(images);
    let mut ctx = ForwardCtx::new(&vars, &state.buffers, Mode::Train);
    // a softmax row that degenerates means the weights have already blown up
    let out = forward(&mut tape, x, &cfg.network, &mut ctx).map_err(|e| match e {
        Error::DegenerateRow { .. } => Error::NonFiniteLoss {
            step: state.step + 1,
            param: largest_param(&state.params),
        },
        e => e,
    })?;
    let stat_updates = std::mem::take(&mut ctx.stat_updates);
    let terms = segmentation_loss(
        &mut tape,
        out.logits,
        out.aux_logits,
        &labels,
        cfg.aux_weight,
    )?;
    let total = tape.value(terms.total).item();
    let grads = tape.backward(terms.total)?;

    let mut sq = 0.0;
    let mut worst: Option<(&str, f64)> = None;
    for (name, var) in vars.iter() {
        for &g in grads.wrt(var).data() {
            sq += g * g;
            let mag = if g.is_nan() { f64::INFINITY } else { g.abs() };
            if worst.is_none_or(|w| mag > w.1) {
                worst = Some((name, mag));
            }
        }
    }
    if !total.is_finite() || !sq.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step + 1,
            param: worst.map_or_else(String::new, |w| w.0.to_string()),
        });
    }
    let grad_norm = sq.sqrt();
    let scale = if grad_norm > cfg.clip_norm {
        cfg.clip_norm / grad_norm
    } else {
        1.0
    };

    for (name, var) in vars.iter() {
        let g = grads.wrt(var).data();
        let v = state
            .momentum
            .get_mut(name)
            .expect("momentum per parameter");
        for (vi, gi) in v.data_mut().iter_mut().zip(g) {
            *vi = cfg.momentum * *vi + scale * gi;
        }
        let v = v.data().to_vec();
        let p = state.params.get_mut(name).expect("parameter exists");
        for (pi, vi) in p.data_mut().iter_mut().zip(&v) {
            *pi -= cfg.lr * vi;
        }
    }
    for (name, t) in stat_updates {
        state.buffers.set(&name, t)?;
    }
    state.step += 1;
    Ok(StepLoss {
        total,
        main: tape.value(terms.main).item(),
        aux: tape.value(terms.aux).item(),
        grad_norm,
    })
}

fn largest_param(params: &ParamStore) -> String {
    let mag = |t: &Tensor| {
        t.data()
            .iter()
            .map(|v| if v.is_nan() { f64::INFINITY } else { v.abs() })
            .fold(0.0, f64::max)
    };
    params
        .iter()
        .map(|(name, t)| (name, mag(t)))
        .fold(None, |best: Option<(&str, f64)>, (n, m)| match best {
            Some(b) if b.1 >= m => Some(b),
            _ => Some((n, m)),
        })
        .map_or_else(String::new, |b| b.0.to_string())
}

/// The train and held-out splits a config describes.
pub fn splits(cfg: &RunConfig) -> (Vec<Sample>, Vec<Sample>) {
    let n = cfg.train_images;
    let train = generate_range(cfg.data_seed, 0..n, cfg.image_size);
    let held_out = generate_range(cfg.data_seed, n..n + cfg.eval_images, cfg.image_size);
    (train, held_out)
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Every record now in `metrics.jsonl`.
    pub records: Vec<MetricsRecord>,
    /// `(step, loss)` for each step taken by this invocation.
    pub losses: Vec<(usize, StepLoss)>,
    pub out_dir: PathBuf,
}

impl TrainOutcome {
    pub fn last(&self) -> &MetricsRecord {
        self.records
            .last()
            .expect("every run evaluates at least once")
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn parse_record(line: &str, path: &Path) -> Result<MetricsRecord> {
    serde_json::from_str(line).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Existing `metrics.jsonl` lines with their parsed records.
fn read_records(path: &Path) -> Result<Vec<(String, MetricsRecord)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = io(path, fs::read_to_string(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok((l.to_string(), parse_record(l, path)?)))
        .collect()
}

/// The two append-only logs of a run.
struct RunLogs<'p> {
    log: File,
    log_path: PathBuf,
    metrics: File,
    metrics_path: PathBuf,
    progress: &'p mut dyn FnMut(&str),
}

impl RunLogs<'_> {
    fn line(&mut self, line: String) -> Result<()> {
        (self.progress)(&line);
        io(&self.log_path, writeln!(self.log, "{line}"))
    }

    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        let json = serde_json::to_string(rec).expect("record serializes");
        io(&self.metrics_path, writeln!(self.metrics, "{json}"))?;
        io(&self.metrics_path, self.metrics.flush())?;
        self.line(format!(
            "eval step {} loss {:.6} oa {:.4} miou {:.4} mean_f1 {:.4}",
            rec.step, rec.loss, rec.oa, rec.miou, rec.mean_f1
        ))
    }
}

/// Runs (or resumes) training as `cfg` describes, writing the train log,
/// metrics log and checkpoints into `cfg.out_dir`. `progress` receives each
/// train-log line as it is written.
///
/// Evaluation on the held-out split happens at step 0, every
/// `eval_interval` steps and after the last step; `best.ckpt` follows the
/// best held-out mIoU and `final.ckpt` is written at the end.
pub fn train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.network.num_classes != 4 {
        return Err(Error::config(format!(
            "synthetic data has 4 classes; num_classes = {} cannot be trained",
            cfg.network.num_classes
        )));
    }
    let dir = &cfg.out_dir;
    io(dir, fs::create_dir_all(dir))?;
    let digest = cfg.digest();

    let mut state = match resume {
        Some(p) => TrainState::from_checkpoint(Checkpoint::load(p)?, cfg)?,
        None => TrainState::init(cfg)?,
    };

    let log_path = dir.join(TRAIN_LOG);
    let metrics_path = dir.join(METRICS_LOG);
    // a resumed run keeps the records its checkpoint had already seen
    let kept = match resume {
        Some(_) => read_records(&metrics_path)?
            .into_iter()
            .filter(|(_, r)| r.step <= state.step)
            .collect(),
        None => Vec::new(),
    };
    let log = match resume {
        Some(_) => OpenOptions::new().create(true).append(true).open(&log_path),
        None => File::create(&log_path),
    };
    let mut logs = RunLogs {
        log: io(&log_path, log)?,
        metrics: io(&metrics_path, File::create(&metrics_path))?,
        log_path,
        metrics_path,
        progress,
    };

    let mut records = Vec::new();
    for (line, rec) in kept {
        io(&logs.metrics_path, writeln!(logs.metrics, "{line}"))?;
        records.push(rec);
    }
    match resume {
        Some(p) => logs.line(format!(
            "# resumed at step {} from {}",
            state.step,
            p.display()
        ))?,
        None => {
            for l in cfg.to_text().lines() {
                logs.line(format!("# {}", l.trim_start_matches("# ")))?;
            }
        }
    }
    logs.line(format!("# config_digest = {digest}"))?;

    let (train_set, held_out) = splits(cfg);
    let evaluate_into = |state: &mut TrainState, logs: &mut RunLogs| -> Result<MetricsRecord> {
        let report = evaluate(&state.params, &state.buffers, &cfg.network, &held_out)?;
        let rec = report.record(state.step, &digest);
        logs.record(&rec)?;
        if rec.miou > state.best_miou {
            state.best_miou = rec.miou;
            state.checkpoint(cfg).save(&dir.join(BEST_CHECKPOINT))?;
        }
        Ok(rec)
    };

    if resume.is_none() {
        records.push(evaluate_into(&mut state, &mut logs)?);
    }
    let mut losses = Vec::new();
    while state.step < cfg.steps {
        let idx = batch_indices(cfg.seed, state.step, cfg.batch_size, train_set.len());
        let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
        let loss = match sgd_step(&mut state, cfg, &batch) {
            Ok(l) => l,
            Err(e) => {
                logs.line(format!("# aborted: {e}"))?;
                return Err(e);
            }
        };
        losses.push((state.step, loss));
        if state.step % cfg.log_interval == 0 {
            logs.line(format!(
                "step {} loss {:.6} main {:.6} aux {:.6} grad_norm {:.4} lr {:?}",
                state.step, loss.total, loss.main, loss.aux, loss.grad_norm, cfg.lr
            ))?;
        }
        if state.step % cfg.eval_interval == 0 || state.step == cfg.steps {
            records.push(evaluate_into(&mut state, &mut logs)?);
        }
    }
    state.checkpoint(cfg).save(&dir.join(FINAL_CHECKPOINT))?;
    Ok(TrainOutcome {
        state,
        records,
        losses,
        out_dir: dir.clone(),
    })
}
