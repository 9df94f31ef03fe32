//! `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::{BaseCnnConfig, Head};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetKind,
    /// CIFAR-10 training records.
    pub data_path: Option<PathBuf>,
    /// CIFAR-10 validation records.
    pub val_path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Set explicitly with `data_seed`; otherwise follows `seed`.
    pub data_seed: Option<u64>,
    pub cnn_channels: Vec<usize>,
    pub cnn_strides: Vec<usize>,
    /// Single-scale checkpoint that replaces the pretraining stage.
    pub pretrained: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::desk(),
            dataset: DatasetKind::Synthetic,
            data_path: None,
            val_path: None,
            synthetic: SyntheticSpec::default(),
            data_seed: None,
            cnn_channels: vec![16, 32, 64],
            cnn_strides: vec![2, 2, 2],
            pretrained: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "head",
    "dataset",
    "data_path",
    "val_path",
    "scales",
    "lr0",
    "momentum",
    "nesterov",
    "weight_decay",
    "decay_every",
    "decay_factor",
    "epochs",
    "batch_size",
    "seed",
    "pretrain_epochs",
    "pretrain_lr",
    "pretrained",
    "augment",
    "out_dir",
    "cnn_channels",
    "cnn_strides",
    "shapes",
    "textures",
    "train_per_class",
    "val_per_class",
    "noise",
    "data_seed",
];

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        // relative paths inside the file are taken relative to the file
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data_path, &mut cfg.val_path, &mut cfg.pretrained] {
            if let Some(p) = p.as_mut() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = dir.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(msg) => at(msg),
                other => at(other.to_string()),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synthetic;
        match key {
            "head" => t.head = value.parse()?,
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetKind::Synthetic,
                    "cifar10" => DatasetKind::Cifar10,
                    other => return Err(Error::Config(format!("unknown dataset `{other}`"))),
                }
            }
            "data_path" => self.data_path = Some(value.into()),
            "val_path" => self.val_path = Some(value.into()),
            "scales" => t.scales = parse_scales(value)?,
            "lr0" => t.lr0 = num(key, value)?,
            "momentum" => t.momentum = num(key, value)?,
            "nesterov" => t.nesterov = flag(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "decay_every" => t.decay_every = num(key, value)?,
            "decay_factor" => t.decay_factor = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "pretrain_epochs" => t.pretrain_epochs = num(key, value)?,
            "pretrain_lr" => t.pretrain_lr = num(key, value)?,
            "pretrained" => self.pretrained = Some(value.into()),
            "augment" => t.augment = flag(key, value)?,
            "out_dir" => self.out_dir = value.into(),
            "cnn_channels" => self.cnn_channels = list(key, value)?,
            "cnn_strides" => self.cnn_strides = list(key, value)?,
            "shapes" => s.shapes = num(key, value)?,
            "textures" => s.textures = num(key, value)?,
            "train_per_class" => s.train_per_class = num(key, value)?,
            "val_per_class" => s.val_per_class = num(key, value)?,
            "noise" => s.noise = num(key, value)?,
            "data_seed" => self.data_seed = Some(num(key, value)?),
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}` (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.cnn_config(1)?;
        if self.dataset == DatasetKind::Cifar10 && (self.data_path.is_none() || self.val_path.is_none()) {
            return Err(Error::Config("dataset = cifar10 needs data_path and val_path".into()));
        }
        Ok(())
    }

    pub fn cnn_config(&self, in_channels: usize) -> Result<BaseCnnConfig> {
        BaseCnnConfig::new(in_channels, &self.cnn_channels, &self.cnn_strides)
    }

    /// Synthetic task spec with the effective data seed.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.data_seed.unwrap_or(self.train.seed),
            ..self.synthetic.clone()
        }
    }

    /// Head trained by `train` and expected by `bench`.
    pub fn head(&self) -> Head {
        self.train.head
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{value}`"))),
    }
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

/// `16x16, 32x32` (or `×`) into `[(16, 16), (32, 32)]`; a bare `n` means `n×n`.
pub fn parse_scales(value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|item| {
            let item = item.trim();
            let bad = || Error::Config(format!("bad scale `{item}`, expected H×W such as 32x32"));
            let (h, w) = match item.split_once(['x', 'X', '×']) {
                Some((h, w)) => (
                    h.trim().parse().map_err(|_| bad())?,
                    w.trim().parse().map_err(|_| bad())?,
                ),
                None => {
                    let n = item.parse().map_err(|_| bad())?;
                    (n, n)
                }
            };
            if h == 0 || w == 0 {
                return Err(bad());
            }
            Ok((h, w))
        })
        .collect()
}
