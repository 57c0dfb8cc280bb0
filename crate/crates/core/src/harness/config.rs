//! Flat `key = value` configuration files.
//!
//! Lines are trimmed; `#` starts a comment; blank lines are ignored. Every key
//! must be known to the config type being read and may appear once.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lsk::BranchList;
use crate::network::NetworkConfig;
use crate::nn::{BN_EPS, BN_MOMENTUM, IGNORE_LABEL};
use crate::tksa::KeepRatio;

/// Parsed key/value pairs in file order.
#[derive(Debug, Default)]
pub struct KeyValues {
    entries: IndexMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected `key = value`",
                    i + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", i + 1)));
            }
            if entries
                .insert(key.to_string(), (i + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::config(format!(
                    "line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
        }
        Ok(KeyValues { entries })
    }

    /// Removes and parses `key` if present.
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.shift_remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| {
                Error::config(format!("line {line}: bad value `{v}` for `{key}`: {e}"))
            }),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.shift_remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|e| {
                        Error::config(format!("line {line}: bad item `{p}` in `{key}`: {e}"))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Fails on the first key nobody consumed.
    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => {
                Err(Error::config(format!("line {line}: unknown key `{key}`")))
            }
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

macro_rules! take_into {
    ($kv:ident, $target:expr, $key:literal) => {
        if let Some(v) = $kv.take($key)? {
            $target = v;
        }
    };
}

/// Procedural dataset parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Index of the first image drawn; images are seeded per index, so a
    /// split is a contiguous index range.
    pub start_index: usize,
    pub num_images: usize,
    pub size: usize,
    pub num_classes: usize,
    pub out_dir: PathBuf,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            start_index: 0,
            num_images: 500,
            size: 64,
            num_classes: 4,
            out_dir: PathBuf::from("data"),
        }
    }
}

impl SynthConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut c = SynthConfig::default();
        take_into!(kv, c.seed, "seed");
        take_into!(kv, c.start_index, "start_index");
        take_into!(kv, c.num_images, "num_images");
        take_into!(kv, c.size, "size");
        take_into!(kv, c.num_classes, "num_classes");
        take_into!(kv, c.out_dir, "out_dir");
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(Error::config(format!(
                "image size {} must be a positive multiple of 16",
                self.size
            )));
        }
        if self.num_classes != 4 {
            return Err(Error::config(format!(
                "the shape generator draws exactly 4 classes, not {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
    /// Seeds the synthetic images.
    pub data_seed: u64,
    pub image_size: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub aux_weight: f64,
    pub log_interval: usize,
    pub eval_interval: usize,
    pub network: NetworkConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data_seed: 7,
            image_size: 64,
            train_images: 400,
            eval_images: 100,
            batch_size: 8,
            steps: 600,
            lr: 0.05,
            momentum: 0.9,
            clip_norm: 5.0,
            aux_weight: crate::network::DEFAULT_AUX_WEIGHT,
            log_interval: 10,
            eval_interval: 100,
            network: NetworkConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut c = RunConfig::default();
        take_into!(kv, c.seed, "seed");
        take_into!(kv, c.data_seed, "data_seed");
        take_into!(kv, c.image_size, "image_size");
        take_into!(kv, c.train_images, "train_images");
        take_into!(kv, c.eval_images, "eval_images");
        take_into!(kv, c.batch_size, "batch_size");
        take_into!(kv, c.steps, "steps");
        take_into!(kv, c.lr, "lr");
        take_into!(kv, c.momentum, "momentum");
        take_into!(kv, c.clip_norm, "clip_norm");
        take_into!(kv, c.aux_weight, "aux_weight");
        take_into!(kv, c.log_interval, "log_interval");
        take_into!(kv, c.eval_interval, "eval_interval");
        take_into!(kv, c.out_dir, "out_dir");
        let net = &mut c.network;
        take_into!(kv, net.num_classes, "num_classes");
        take_into!(kv, net.blocks_per_stage, "blocks_per_stage");
        take_into!(kv, net.decoder_channels, "decoder_channels");
        take_into!(kv, net.heads, "heads");
        take_into!(kv, net.mask_kernel, "mask_kernel");
        if let Some(v) = kv.take_list("stage_channels")? {
            net.stage_channels = v;
        }
        if let Some(v) = kv.take_list::<KeepRatio>("k_ratios")? {
            net.k_ratios = v;
        }
        if let Some(v) = kv.take::<BranchList>("lsk_branches")? {
            net.lsk_branches = v.0;
        }
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        if self.train_images == 0 || self.eval_images == 0 {
            return Err(Error::config(
                "train_images and eval_images must be positive",
            ));
        }
        if self.batch_size < 2 || self.batch_size > self.train_images {
            return Err(Error::config(format!(
                "batch_size {} must lie in 2..={} (batch statistics need two images)",
                self.batch_size, self.train_images
            )));
        }
        if self.log_interval == 0 || self.eval_interval == 0 {
            return Err(Error::config(
                "log_interval and eval_interval must be positive",
            ));
        }
        for (name, v) in [("lr", self.lr), ("clip_norm", self.clip_norm)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.aux_weight.is_finite() && self.aux_weight >= 0.0) {
            return Err(Error::config(format!(
                "aux_weight {} must be >= 0",
                self.aux_weight
            )));
        }
        Ok(())
    }

    /// The dataset generator settings implied by this run.
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.data_seed,
            start_index: 0,
            num_images: self.train_images + self.eval_images,
            size: self.image_size,
            num_classes: self.network.num_classes,
            out_dir: self.out_dir.join("data"),
        }
    }

    /// Canonical text form: every key, then the fixed constants as comments.
    /// Parses back to an equal config.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let join = |v: Vec<String>| v.join(",");
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("seed", self.seed.to_string());
        line("data_seed", self.data_seed.to_string());
        line("image_size", self.image_size.to_string());
        line("train_images", self.train_images.to_string());
        line("eval_images", self.eval_images.to_string());
        line("batch_size", self.batch_size.to_string());
        line("steps", self.steps.to_string());
        line("lr", format!("{:?}", self.lr));
        line("momentum", format!("{:?}", self.momentum));
        line("clip_norm", format!("{:?}", self.clip_norm));
        line("aux_weight", format!("{:?}", self.aux_weight));
        line("log_interval", self.log_interval.to_string());
        line("eval_interval", self.eval_interval.to_string());
        line("num_classes", n.num_classes.to_string());
        line(
            "stage_channels",
            join(n.stage_channels.iter().map(|c| c.to_string()).collect()),
        );
        line("blocks_per_stage", n.blocks_per_stage.to_string());
        line("decoder_channels", n.decoder_channels.to_string());
        line("heads", n.heads.to_string());
        line(
            "k_ratios",
            join(n.k_ratios.iter().map(|k| k.to_string()).collect()),
        );
        line(
            "lsk_branches",
            BranchList(n.lsk_branches.clone()).to_string(),
        );
        line("mask_kernel", n.mask_kernel.to_string());
        line("out_dir", self.out_dir.display().to_string());
        let _ = writeln!(
            s,
            "# constants: bn_eps = {BN_EPS:?}, bn_momentum = {BN_MOMENTUM:?}, \
             ignore_label = {IGNORE_LABEL}, optimizer = sgd-momentum, init = kaiming-uniform"
        );
        s
    }

    /// The config with the fields that do not affect the values computed at
    /// any given step (run length, output location) blanked out.
    pub fn trajectory(&self) -> RunConfig {
        RunConfig {
            steps: 0,
            out_dir: PathBuf::new(),
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the canonical text of [`RunConfig::trajectory`]. A run
    /// cut short and resumed shares the digest of the uninterrupted run.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.trajectory().to_text().as_bytes()))
    }
}
