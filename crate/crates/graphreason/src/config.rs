//! Run configuration: a flat `key = value` text format covering dataset,
//! model, training, and sweep settings.
//!
//! Parsing is strict — unknown keys, duplicate keys, and malformed values
//! are errors with line numbers, so a typo never silently falls back to a
//! default. The resolved configuration (defaults filled in, seed override
//! applied) has a canonical rendering whose SHA-256 digest ties artifacts
//! like checkpoints to the exact settings that produced them.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Ablations, Activation, ModelConfig, Variant};
use crate::scenes::{BenchmarkSpec, DropMode, Split};
use crate::tensor::optim::SgdConfig;
use crate::tensor::Precision;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("config key '{key}': {msg}")]
    Value { key: String, msg: String },
    #[error("unknown config keys: {keys}")]
    Unknown { keys: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Parsed `key = value` pairs that track which keys were consumed.
#[derive(Debug)]
pub struct RawConfig {
    pairs: BTreeMap<String, (String, usize)>,
    used: RefCell<BTreeSet<String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig, ConfigError> {
        let mut pairs = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let no_comment = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let trimmed = no_comment.trim();
            if trimmed.is_empty() {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Line {
                line,
                msg: format!("expected 'key = value', got '{trimmed}'"),
            })?;
            let key = key.trim().to_owned();
            let value = value.trim().to_owned();
            if key.is_empty() {
                return Err(ConfigError::Line {
                    line,
                    msg: "empty key".into(),
                });
            }
            if let Some((_, first)) = pairs.insert(key.clone(), (value, line)) {
                return Err(ConfigError::Line {
                    line,
                    msg: format!("key '{key}' already set on line {first}"),
                });
            }
        }
        Ok(RawConfig {
            pairs,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn from_file(path: &Path) -> Result<RawConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn empty() -> RawConfig {
        RawConfig {
            pairs: BTreeMap::new(),
            used: RefCell::new(BTreeSet::new()),
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let found = self.pairs.get(key).map(|(v, _)| v.as_str());
        if found.is_some() {
            self.used.borrow_mut().insert(key.to_owned());
        }
        found
    }

    fn parse_with<T>(&self, key: &str, default: T, kind: &str, f: impl Fn(&str) -> Option<T>) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => f(s).ok_or_else(|| ConfigError::Value {
                key: key.to_owned(),
                msg: format!("'{s}' is not {kind}"),
            }),
        }
    }

    pub fn take_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.parse_with(key, default, "a non-negative integer", |s| s.parse().ok())
    }

    pub fn take_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.parse_with(key, default, "a non-negative integer", |s| s.parse().ok())
    }

    pub fn take_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.parse_with(key, default, "a number", |s| s.parse().ok())
    }

    pub fn take_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        self.parse_with(key, default, "true or false", |s| match s {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })
    }

    pub fn take_str(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_owned()
    }

    /// Comma-separated floats, e.g. `0, 0.25, 0.5`.
    pub fn take_f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(s) => s
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|_| ConfigError::Value {
                    key: key.to_owned(),
                    msg: format!("'{s}' is not a comma-separated list of numbers"),
                }),
        }
    }

    /// Error if any key was never consumed by the schema.
    pub fn finish(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        let unknown: Vec<String> = self
            .pairs
            .iter()
            .filter(|(k, _)| !used.contains(*k))
            .map(|(k, (_, line))| format!("'{k}' (line {line})"))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Unknown {
                keys: unknown.join(", "),
            })
        }
    }
}

/// Region-proposal sweep settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    /// Overlap thresholds to evaluate.
    pub deltas: Vec<f64>,
    /// Proposals drawn per ground-truth region.
    pub proposals: usize,
    /// Corner jitter as a fraction of box size, in [0, 0.5).
    pub jitter: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            deltas: vec![0.0, 0.25, 0.5, 0.65, 0.8],
            proposals: 3,
            jitter: 0.2,
        }
    }
}

/// Everything a run needs, resolved from a config file plus overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: BenchmarkSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepSettings,
    pub eval_split: Split,
    /// Apply the region-drop protocol during `eval` at this threshold.
    pub eval_drop: Option<(DropMode, f64)>,
    /// Deliberately corrupt one adjoint in the gradient-check suite, to
    /// demonstrate the check fails when a backward rule is wrong.
    pub gradcheck_corrupt: bool,
}

impl RunConfig {
    /// Parse a config file (or use all defaults when `path` is `None`),
    /// apply the optional seed override to both data generation and
    /// training, and validate the result.
    pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> Result<RunConfig, ConfigError> {
        let raw = match path {
            Some(p) => RawConfig::from_file(p)?,
            None => RawConfig::empty(),
        };
        let cfg = Self::from_raw(&raw, seed_override)?;
        raw.finish()?;
        Ok(cfg)
    }

    pub fn from_raw(raw: &RawConfig, seed_override: Option<u64>) -> Result<RunConfig, ConfigError> {
        let d = BenchmarkSpec::default();
        let spec = BenchmarkSpec {
            classes: raw.take_usize("data.classes", d.classes)?,
            grid: (
                raw.take_usize("data.grid_h", d.grid.0)?,
                raw.take_usize("data.grid_w", d.grid.1)?,
            ),
            channels: raw.take_usize("data.channels", d.channels)?,
            scene_size: (
                raw.take_f64("data.scene_h", d.scene_size.0)?,
                raw.take_f64("data.scene_w", d.scene_size.1)?,
            ),
            scenes: raw.take_usize("data.scenes", d.scenes)?,
            regions_min: raw.take_usize("data.regions_min", d.regions_min)?,
            regions_max: raw.take_usize("data.regions_max", d.regions_max)?,
            ambiguity: raw.take_f64("data.ambiguity", d.ambiguity)?,
            val_frac: raw.take_f64("data.val_frac", d.val_frac)?,
            test_frac: raw.take_f64("data.test_frac", d.test_frac)?,
            noise_background: raw.take_f64("data.noise_background", d.noise_background)?,
            noise_region: raw.take_f64("data.noise_region", d.noise_region)?,
            noise_cell: raw.take_f64("data.noise_cell", d.noise_cell)?,
            seed: seed_override.unwrap_or(raw.take_u64("data.seed", d.seed)?),
        };
        spec.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let m = ModelConfig::default();
        let variant_s = raw.take_str("model.variant", Variant::Full.name());
        let variant = Variant::parse(&variant_s).ok_or_else(|| ConfigError::Value {
            key: "model.variant".into(),
            msg: format!("'{variant_s}' is not one of baseline/local/global/full"),
        })?;
        let act_s = raw.take_str("model.candidate_act", m.candidate_act.name());
        let candidate_act = Activation::parse(&act_s).ok_or_else(|| ConfigError::Value {
            key: "model.candidate_act".into(),
            msg: format!("'{act_s}' is not one of tanh/sigmoid"),
        })?;
        let mut ablations = Ablations::default();
        for (flag, _) in Ablations::default().flags() {
            let v = raw.take_bool(&format!("model.{flag}"), false)?;
            ablations.set(flag, v);
        }
        let model = ModelConfig {
            classes: spec.classes,
            feat_channels: spec.channels,
            grid: spec.grid,
            mem_channels: raw.take_usize("model.mem_channels", m.mem_channels)?,
            conv_channels: raw.take_usize("model.conv_channels", m.conv_channels)?,
            fc_width: raw.take_usize("model.fc_width", m.fc_width)?,
            crop: raw.take_usize("model.crop", m.crop)?,
            iterations: raw.take_usize("model.iterations", m.iterations)?,
            graph_dim: raw.take_usize("model.graph_dim", m.graph_dim)?,
            graph_stacks: raw.take_usize("model.graph_stacks", m.graph_stacks)?,
            kernel_bandwidth: raw.take_f64("model.kernel_bandwidth", m.kernel_bandwidth)?,
            reweight_floor: raw.take_f64("model.reweight_floor", m.reweight_floor)?,
            variant,
            ablations,
            candidate_act,
        };
        model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let t = TrainConfig::default();
        let o = t.optimizer.clone();
        let precision_s = raw.take_str("train.precision", precision_name(t.precision));
        let precision = match precision_s.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            _ => {
                return Err(ConfigError::Value {
                    key: "train.precision".into(),
                    msg: format!("'{precision_s}' is not f32 or f64"),
                })
            }
        };
        let decay_step = raw.take_usize("train.lr_decay_step", 0)?;
        let train = TrainConfig {
            steps: raw.take_usize("train.steps", t.steps)?,
            optimizer: SgdConfig {
                lr: raw.take_f64("train.lr", o.lr)?,
                momentum: raw.take_f64("train.momentum", o.momentum)?,
                weight_decay: raw.take_f64("train.weight_decay", o.weight_decay)?,
                lr_decay_step: if decay_step == 0 { None } else { Some(decay_step) },
                lr_decay_factor: raw.take_f64("train.lr_decay_factor", o.lr_decay_factor)?,
            },
            seed: seed_override.unwrap_or(raw.take_u64("train.seed", t.seed)?),
            log_every: raw.take_usize("train.log_every", t.log_every)?,
            precision,
        };
        if !(train.optimizer.lr.is_finite() && train.optimizer.lr > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "learning rate {} must be positive",
                train.optimizer.lr
            )));
        }

        let s = SweepSettings::default();
        let sweep = SweepSettings {
            deltas: raw.take_f64_list("sweep.deltas", &s.deltas)?,
            proposals: raw.take_usize("sweep.proposals", s.proposals)?,
            jitter: raw.take_f64("sweep.jitter", s.jitter)?,
        };
        if sweep.deltas.is_empty() {
            return Err(ConfigError::Invalid("sweep.deltas is empty".into()));
        }
        for &dl in &sweep.deltas {
            if !(0.0..=1.0).contains(&dl) {
                return Err(ConfigError::Invalid(format!(
                    "sweep delta {dl} outside [0, 1]"
                )));
            }
        }
        if !(0.0..0.5).contains(&sweep.jitter) {
            return Err(ConfigError::Invalid(format!(
                "sweep.jitter {} outside [0, 0.5)",
                sweep.jitter
            )));
        }
        if sweep.proposals == 0 {
            return Err(ConfigError::Invalid("sweep.proposals must be positive".into()));
        }

        let split_s = raw.take_str("eval.split", Split::Test.name());
        let eval_split = Split::parse(&split_s).ok_or_else(|| ConfigError::Value {
            key: "eval.split".into(),
            msg: format!("'{split_s}' is not one of train/val/test"),
        })?;
        let drop_mode_s = raw.take_str("eval.drop_mode", "none");
        let drop_delta = raw.take_f64("eval.drop_delta", 0.5)?;
        if !(0.0..=1.0).contains(&drop_delta) {
            return Err(ConfigError::Invalid(format!(
                "eval.drop_delta {drop_delta} outside [0, 1]"
            )));
        }
        let eval_drop = match drop_mode_s.as_str() {
            "none" => None,
            other => match DropMode::parse(other) {
                Some(mode) => Some((mode, drop_delta)),
                None => {
                    return Err(ConfigError::Value {
                        key: "eval.drop_mode".into(),
                        msg: format!("'{other}' is not one of none/pre/post"),
                    })
                }
            },
        };
        let gradcheck_corrupt = raw.take_bool("gradcheck.corrupt", false)?;

        Ok(RunConfig {
            spec,
            model,
            train,
            sweep,
            eval_split,
            eval_drop,
            gradcheck_corrupt,
        })
    }

    /// Canonical rendering of every resolved setting, one sorted
    /// `key = value` line each. Parsing this text reproduces the config.
    pub fn canonical(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        let mut kv = |k: &str, v: String| lines.push(format!("{k} = {v}"));
        let sp = &self.spec;
        kv("data.classes", sp.classes.to_string());
        kv("data.grid_h", sp.grid.0.to_string());
        kv("data.grid_w", sp.grid.1.to_string());
        kv("data.channels", sp.channels.to_string());
        kv("data.scene_h", sp.scene_size.0.to_string());
        kv("data.scene_w", sp.scene_size.1.to_string());
        kv("data.scenes", sp.scenes.to_string());
        kv("data.regions_min", sp.regions_min.to_string());
        kv("data.regions_max", sp.regions_max.to_string());
        kv("data.ambiguity", sp.ambiguity.to_string());
        kv("data.val_frac", sp.val_frac.to_string());
        kv("data.test_frac", sp.test_frac.to_string());
        kv("data.noise_background", sp.noise_background.to_string());
        kv("data.noise_region", sp.noise_region.to_string());
        kv("data.noise_cell", sp.noise_cell.to_string());
        kv("data.seed", sp.seed.to_string());
        let m = &self.model;
        kv("model.variant", m.variant.name().to_string());
        kv("model.mem_channels", m.mem_channels.to_string());
        kv("model.conv_channels", m.conv_channels.to_string());
        kv("model.fc_width", m.fc_width.to_string());
        kv("model.crop", m.crop.to_string());
        kv("model.iterations", m.iterations.to_string());
        kv("model.graph_dim", m.graph_dim.to_string());
        kv("model.graph_stacks", m.graph_stacks.to_string());
        kv("model.kernel_bandwidth", m.kernel_bandwidth.to_string());
        kv("model.reweight_floor", m.reweight_floor.to_string());
        kv("model.candidate_act", m.candidate_act.name().to_string());
        for (flag, set) in m.ablations.flags() {
            kv(&format!("model.{flag}"), set.to_string());
        }
        let t = &self.train;
        kv("train.steps", t.steps.to_string());
        kv("train.lr", t.optimizer.lr.to_string());
        kv("train.momentum", t.optimizer.momentum.to_string());
        kv("train.weight_decay", t.optimizer.weight_decay.to_string());
        kv(
            "train.lr_decay_step",
            t.optimizer.lr_decay_step.unwrap_or(0).to_string(),
        );
        kv(
            "train.lr_decay_factor",
            t.optimizer.lr_decay_factor.to_string(),
        );
        kv("train.seed", t.seed.to_string());
        kv("train.log_every", t.log_every.to_string());
        kv("train.precision", precision_name(t.precision).to_string());
        let sw = &self.sweep;
        kv(
            "sweep.deltas",
            sw.deltas
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("sweep.proposals", sw.proposals.to_string());
        kv("sweep.jitter", sw.jitter.to_string());
        kv("eval.split", self.eval_split.name().to_string());
        kv(
            "eval.drop_mode",
            self.eval_drop
                .map(|(m, _)| m.name())
                .unwrap_or("none")
                .to_string(),
        );
        kv(
            "eval.drop_delta",
            self.eval_drop.map(|(_, d)| d).unwrap_or(0.5).to_string(),
        );
        kv("gradcheck.corrupt", self.gradcheck_corrupt.to_string());
        lines.sort();
        let mut out = String::new();
        for l in &lines {
            let _ = writeln!(out, "{l}");
        }
        out
    }

    /// SHA-256 fingerprint of the settings that determine the trained
    /// model: every `data.*`, `model.*`, and `train.*` line of the
    /// canonical rendering. Evaluation-time knobs (`eval.*`, `sweep.*`,
    /// `gradcheck.*`) are deliberately excluded so a checkpoint stays
    /// usable when only those change.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for line in self.canonical().lines() {
            if line.starts_with("data.") || line.starts_with("model.") || line.starts_with("train.")
            {
                h.update(line.as_bytes());
                h.update(b"\n");
            }
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}
