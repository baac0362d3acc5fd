//! Flat `key=value` run configuration.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored. Keys are
//! namespaced (`backbone.`, `aspp.`, `model.`, `pee.`, `train.`, `data.`,
//! `synth.`, `eval.`). Unknown keys are errors. Later assignments win, so
//! command-line overrides are applied after the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{AugmentConfig, SynthConfig, DEFAULT_EDGE_WIDTH};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot use `{value}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{origin}: line {line}: expected key=value, got `{text}`")]
    Syntax {
        origin: String,
        line: usize,
        text: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Where samples come from and how they are split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dir: PathBuf,
    /// The last `holdout` ids (in sorted order) form the test split.
    pub holdout: usize,
    pub edge_width: usize,
}

/// Which split `eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    pub split: EvalSplit,
}

/// Everything a command needs. Defaults are the desk preset.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            synth: SynthConfig {
                n_images: 250,
                image_size: 64,
                contrast: 0.4,
                noise_sigma: 0.05,
                seed: 7,
                ..SynthConfig::default()
            },
            data: DataConfig {
                dir: PathBuf::from("data"),
                holdout: 0,
                edge_width: DEFAULT_EDGE_WIDTH,
            },
            eval: EvalConfig {
                threshold: DEFAULT_THRESHOLD,
                split: EvalSplit::Test,
            },
        }
    }
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| bad(key, value, e.to_string()))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn parse_list<T: std::str::FromStr, const N: usize>(key: &str, value: &str) -> Result<[T; N], ConfigError>
where
    T::Err: std::fmt::Display,
{
    let items = value
        .split(',')
        .map(|s| parse::<T>(key, s.trim()))
        .collect::<Result<Vec<T>, _>>()?;
    let n = items.len();
    items
        .try_into()
        .map_err(|_| bad(key, value, format!("expected {N} comma-separated values, got {n}")))
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Apply one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "backbone.stem_channels" => m.backbone.stem_channels = parse(key, v)?,
            "backbone.stage_channels" => m.backbone.stage_channels = parse_list(key, v)?,
            "backbone.blocks_per_stage" => m.backbone.blocks_per_stage = parse_list(key, v)?,
            "backbone.reduce_channels" => m.backbone.reduce_channels = parse(key, v)?,
            "aspp.rates" => m.backbone.aspp_rates = parse_list(key, v)?,
            "aspp.out_channels" => m.backbone.aspp_out_channels = parse(key, v)?,
            "model.pee" => m.ablation.pee = parse_bool(key, v)?,
            "model.mtl" => m.ablation.mtl = parse_bool(key, v)?,
            "model.cff" => m.ablation.cff = parse_bool(key, v)?,
            "model.ia" => m.ablation.ia = parse_bool(key, v)?,
            "model.decoder_channels" => m.decoder_channels = parse(key, v)?,
            "pee.pool_sizes" => {
                let stages: Vec<&str> = v.split(';').collect();
                if stages.len() != 4 {
                    return Err(bad(key, v, "expected four `;`-separated stage lists"));
                }
                for (slot, list) in m.pee.pool_sizes_per_stage.iter_mut().zip(stages) {
                    *slot = list
                        .split(',')
                        .map(|k| parse::<usize>(key, k.trim()))
                        .collect::<Result<_, _>>()?;
                }
            }
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.lambdas" => t.lambdas = parse_list(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.base_lr" => t.base_lr = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.poly_power" => t.poly_power = parse(key, v)?,
            "train.workers" => t.workers = parse(key, v)?,
            "train.augment" => t.augment_enabled = parse_bool(key, v)?,
            "data.dir" => self.data.dir = PathBuf::from(v),
            "data.holdout" => self.data.holdout = parse(key, v)?,
            "data.edge_width" => self.data.edge_width = parse(key, v)?,
            "data.out_size" => t.augment.out_size = parse(key, v)?,
            "data.flip_h_prob" => t.augment.flip_h_prob = parse(key, v)?,
            "data.flip_v_prob" => t.augment.flip_v_prob = parse(key, v)?,
            "data.rot_deg_range" => {
                let [a, b] = parse_list(key, v)?;
                t.augment.rot_deg_range = (a, b);
            }
            "data.crop_scale_range" => {
                let [a, b] = parse_list(key, v)?;
                t.augment.crop_scale_range = (a, b);
            }
            "synth.n_images" => s.n_images = parse(key, v)?,
            "synth.image_size" => s.image_size = parse(key, v)?,
            "synth.axis_range" => {
                let [a, b] = parse_list(key, v)?;
                s.axis_range = (a, b);
            }
            "synth.contrast" => s.contrast = parse(key, v)?,
            "synth.noise_sigma" => s.noise_sigma = parse(key, v)?,
            "synth.irregularity" => s.irregularity = parse(key, v)?,
            "synth.seed" => s.seed = parse(key, v)?,
            "eval.threshold" => self.eval.threshold = parse(key, v)?,
            "eval.split" => {
                self.eval.split = match v {
                    "train" => EvalSplit::Train,
                    "test" => EvalSplit::Test,
                    "all" => EvalSplit::All,
                    _ => return Err(bad(key, v, "expected train, test or all")),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Apply every `key=value` line of `text`. `origin` labels errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: origin.to_string(),
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            origin: "--set".into(),
            line: 1,
            text: assignment.to_string(),
        })?;
        self.set(k.trim(), v)
    }

    /// Defaults, then the optional file, then the overrides, then validation.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    /// Propagate shared settings and validate.
    pub fn finish(&mut self) -> Result<(), ConfigError> {
        self.train.augment.seed = self.train.seed;
        self.train.augment.edge_width = self.data.edge_width;
        self.synth.edge_width = self.data.edge_width;
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.synth.validate().map_err(|e| invalid(&e))?;
        if self.data.edge_width % 2 == 0 {
            return Err(ConfigError::Invalid(format!("data.edge_width {} must be odd", self.data.edge_width)));
        }
        if !self.eval.threshold.is_finite() {
            return Err(ConfigError::Invalid("eval.threshold must be finite".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line, in a fixed order.
    /// Feeding the dump back through [`RunConfig::apply_text`] reproduces the
    /// configuration.
    pub fn dump(&self) -> String {
        let m = &self.model;
        let b = &m.backbone;
        let t = &self.train;
        let a: &AugmentConfig = &t.augment;
        let s = &self.synth;
        let split = match self.eval.split {
            EvalSplit::Train => "train",
            EvalSplit::Test => "test",
            EvalSplit::All => "all",
        };
        let pools: Vec<String> = m.pee.pool_sizes_per_stage.iter().map(|p| join(p)).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("backbone.stem_channels", b.stem_channels.to_string()),
            ("backbone.stage_channels", join(&b.stage_channels)),
            ("backbone.blocks_per_stage", join(&b.blocks_per_stage)),
            ("backbone.reduce_channels", b.reduce_channels.to_string()),
            ("aspp.rates", join(&b.aspp_rates)),
            ("aspp.out_channels", b.aspp_out_channels.to_string()),
            ("model.pee", m.ablation.pee.to_string()),
            ("model.mtl", m.ablation.mtl.to_string()),
            ("model.cff", m.ablation.cff.to_string()),
            ("model.ia", m.ablation.ia.to_string()),
            ("model.decoder_channels", m.decoder_channels.to_string()),
            ("pee.pool_sizes", pools.join(";")),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.lambdas", join(&t.lambdas)),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.poly_power", t.poly_power.to_string()),
            ("train.workers", t.workers.to_string()),
            ("train.augment", t.augment_enabled.to_string()),
            ("data.dir", self.data.dir.display().to_string()),
            ("data.holdout", self.data.holdout.to_string()),
            ("data.edge_width", self.data.edge_width.to_string()),
            ("data.out_size", a.out_size.to_string()),
            ("data.flip_h_prob", a.flip_h_prob.to_string()),
            ("data.flip_v_prob", a.flip_v_prob.to_string()),
            ("data.rot_deg_range", join(&[a.rot_deg_range.0, a.rot_deg_range.1])),
            ("data.crop_scale_range", join(&[a.crop_scale_range.0, a.crop_scale_range.1])),
            ("synth.n_images", s.n_images.to_string()),
            ("synth.image_size", s.image_size.to_string()),
            ("synth.axis_range", join(&[s.axis_range.0, s.axis_range.1])),
            ("synth.contrast", s.contrast.to_string()),
            ("synth.noise_sigma", s.noise_sigma.to_string()),
            ("synth.irregularity", s.irregularity.to_string()),
            ("synth.seed", s.seed.to_string()),
            ("eval.threshold", self.eval.threshold.to_string()),
            ("eval.split", split.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }
}
