//! Experiment configuration: a flat `key = value` text format with strict
//! unknown-key rejection, command-line `--set key=value` overrides, a
//! resolved (fully-expanded) serialization written next to checkpoints,
//! and a stable content hash embedded in every report.

use crate::assignloss::{CostWeights, LossWeights};
use crate::fuse::FuseThresholds;
use crate::model::ModelConfig;
use crate::synthgen::SceneSpec;
use crate::train::TrainSettings;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': {reason}")]
    BadValue { key: String, reason: String },
    #[error("malformed line {0}: expected 'key = value'")]
    Malformed(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    // data
    pub data_root: String,
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub things_min: usize,
    pub things_max: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub val_fraction: f64,
    // model
    pub channels: usize,
    pub queries: usize,
    pub embed: usize,
    pub stages: usize,
    pub heads: usize,
    pub d_max: f64,
    pub query_linking: bool,
    pub dense_init: bool,
    pub instance_depth: bool,
    // loss
    pub loss_depth: f64,
    pub loss_mask: f64,
    pub loss_cls: f64,
    pub loss_track: f64,
    pub si_lambda: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub cost_cls: f64,
    pub cost_dice: f64,
    pub cost_bce: f64,
    // train
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    // fuse + track
    pub keep_conf: f64,
    pub overlap_keep: f64,
    pub min_area: usize,
    pub tau: f64,
    pub momentum: f64,
    pub evict_after: usize,
    // eval
    pub eval_k: Vec<usize>,
    pub eval_lambda: Vec<f64>,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_root: "data".into(),
            clips: 250,
            frames: 6,
            height: 64,
            width: 64,
            things_min: 1,
            things_max: 5,
            depth_min: 2.0,
            depth_max: 80.0,
            val_fraction: 0.2,
            channels: 64,
            queries: 16,
            embed: 32,
            stages: 3,
            heads: 4,
            d_max: 88.0,
            query_linking: true,
            dense_init: true,
            instance_depth: true,
            loss_depth: 5.0,
            loss_mask: 1.0,
            loss_cls: 2.0,
            loss_track: 0.25,
            si_lambda: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            cost_cls: 2.0,
            cost_dice: 4.0,
            cost_bce: 1.0,
            lr: 1e-3,
            epochs: 60,
            batch: 8,
            keep_conf: 0.3,
            overlap_keep: 0.5,
            min_area: 2,
            tau: 0.3,
            momentum: 0.8,
            evict_after: 10,
            eval_k: vec![1, 2, 3, 4],
            eval_lambda: vec![0.1, 0.25, 0.5, f64::INFINITY],
            out_dir: "runs/default".into(),
        }
    }
}

macro_rules! keys {
    ($self:ident, $each:ident) => {
        $each!("seed", seed, u64);
        $each!("data.root", data_root, string);
        $each!("data.clips", clips, usize);
        $each!("data.frames", frames, usize);
        $each!("data.height", height, usize);
        $each!("data.width", width, usize);
        $each!("data.things_min", things_min, usize);
        $each!("data.things_max", things_max, usize);
        $each!("data.depth_min", depth_min, f64);
        $each!("data.depth_max", depth_max, f64);
        $each!("data.val_fraction", val_fraction, f64);
        $each!("model.channels", channels, usize);
        $each!("model.queries", queries, usize);
        $each!("model.embed", embed, usize);
        $each!("model.stages", stages, usize);
        $each!("model.heads", heads, usize);
        $each!("model.d_max", d_max, f64);
        $each!("model.query_linking", query_linking, bool);
        $each!("model.dense_init", dense_init, bool);
        $each!("model.instance_depth", instance_depth, bool);
        $each!("loss.depth", loss_depth, f64);
        $each!("loss.mask", loss_mask, f64);
        $each!("loss.cls", loss_cls, f64);
        $each!("loss.track", loss_track, f64);
        $each!("loss.si_lambda", si_lambda, f64);
        $each!("loss.focal_alpha", focal_alpha, f64);
        $each!("loss.focal_gamma", focal_gamma, f64);
        $each!("loss.cost_cls", cost_cls, f64);
        $each!("loss.cost_dice", cost_dice, f64);
        $each!("loss.cost_bce", cost_bce, f64);
        $each!("train.lr", lr, f64);
        $each!("train.epochs", epochs, usize);
        $each!("train.batch", batch, usize);
        $each!("fuse.keep_conf", keep_conf, f64);
        $each!("fuse.overlap_keep", overlap_keep, f64);
        $each!("fuse.min_area", min_area, usize);
        $each!("track.tau", tau, f64);
        $each!("track.momentum", momentum, f64);
        $each!("track.evict_after", evict_after, usize);
        $each!("eval.k", eval_k, usize_list);
        $each!("eval.lambda", eval_lambda, f64_list);
        $each!("out.dir", out_dir, string);
    };
}

impl ExperimentConfig {
    /// Parse a flat key/value file; `#` starts a comment, blank lines are
    /// skipped, unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Malformed(i + 1))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::BadValue { key: key.into(), reason: reason.into() };
        macro_rules! setter {
            ($name:literal, $field:ident, u64) => {
                if key == $name {
                    self.$field = value.parse().map_err(|_| bad("expected integer"))?;
                    return Ok(());
                }
            };
            ($name:literal, $field:ident, usize) => {
                if key == $name {
                    self.$field = value.parse().map_err(|_| bad("expected integer"))?;
                    return Ok(());
                }
            };
            ($name:literal, $field:ident, f64) => {
                if key == $name {
                    self.$field = parse_f64(value).ok_or_else(|| bad("expected number"))?;
                    return Ok(());
                }
            };
            ($name:literal, $field:ident, bool) => {
                if key == $name {
                    self.$field = match value {
                        "true" | "on" | "1" => true,
                        "false" | "off" | "0" => false,
                        _ => return Err(bad("expected true/false")),
                    };
                    return Ok(());
                }
            };
            ($name:literal, $field:ident, string) => {
                if key == $name {
                    self.$field = value.to_string();
                    return Ok(());
                }
            };
            ($name:literal, $field:ident, usize_list) => {
                if key == $name {
                    self.$field = value
                        .split(',')
                        .map(|v| v.trim().parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad("expected comma-separated integers"))?;
                    return Ok(());
                }
            };
            ($name:literal, $field:ident, f64_list) => {
                if key == $name {
                    self.$field = value
                        .split(',')
                        .map(|v| parse_f64(v.trim()))
                        .collect::<Option<_>>()
                        .ok_or_else(|| bad("expected comma-separated numbers"))?;
                    return Ok(());
                }
            };
        }
        keys!(self, setter);
        Err(ConfigError::UnknownKey(key.to_string()))
    }

    /// Fully-resolved serialization: every key, sorted layout, suitable for
    /// re-parsing and for hashing.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emitter {
            ($name:literal, $field:ident, u64) => {
                out.push_str(&format!("{} = {}\n", $name, self.$field));
            };
            ($name:literal, $field:ident, usize) => {
                out.push_str(&format!("{} = {}\n", $name, self.$field));
            };
            ($name:literal, $field:ident, f64) => {
                out.push_str(&format!("{} = {}\n", $name, fmt_f64(self.$field)));
            };
            ($name:literal, $field:ident, bool) => {
                out.push_str(&format!("{} = {}\n", $name, self.$field));
            };
            ($name:literal, $field:ident, string) => {
                out.push_str(&format!("{} = {}\n", $name, self.$field));
            };
            ($name:literal, $field:ident, usize_list) => {
                let items: Vec<String> = self.$field.iter().map(|v| v.to_string()).collect();
                out.push_str(&format!("{} = {}\n", $name, items.join(",")));
            };
            ($name:literal, $field:ident, f64_list) => {
                let items: Vec<String> = self.$field.iter().map(|v| fmt_f64(*v)).collect();
                out.push_str(&format!("{} = {}\n", $name, items.join(",")));
            };
        }
        keys!(self, emitter);
        out
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: &str| ConfigError::BadValue {
            key: key.into(),
            reason: reason.into(),
        };
        if self.stages < 1 {
            return Err(bad("model.stages", "must be >= 1"));
        }
        if self.channels % self.heads != 0 {
            return Err(bad("model.heads", "must divide model.channels"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(bad("data.val_fraction", "must be in [0, 1)"));
        }
        if self.batch == 0 {
            return Err(bad("train.batch", "must be >= 1"));
        }
        self.scene_template().validate().map_err(|e| bad("data", &e.to_string()))
    }

    pub fn scene_template(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed,
            frames: self.frames,
            height: self.height,
            width: self.width,
            things_min: self.things_min,
            things_max: self.things_max,
            depth_min: self.depth_min,
            depth_max: self.depth_max,
            ..Default::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            queries: self.queries,
            embed_dim: self.embed,
            stages: self.stages,
            heads: self.heads,
            d_max: self.d_max,
            query_linking: self.query_linking,
            dense_init: self.dense_init,
            instance_depth: self.instance_depth,
            ..Default::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w_depth: self.loss_depth,
            w_mask: self.loss_mask,
            w_cls: self.loss_cls,
            w_track: self.loss_track,
            si_lambda: self.si_lambda,
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
            stage_weights: Vec::new(),
            cost: CostWeights {
                w_cls: self.cost_cls,
                w_dice: self.cost_dice,
                w_bce: self.cost_bce,
            },
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings { lr: self.lr, epochs: self.epochs, batch: self.batch, seed: self.seed }
    }

    pub fn fuse_thresholds(&self) -> FuseThresholds {
        FuseThresholds {
            keep_conf: self.keep_conf,
            overlap_keep: self.overlap_keep,
            min_area: self.min_area,
            tau: self.tau,
        }
    }
}

fn parse_f64(v: &str) -> Option<f64> {
    match v {
        "inf" | "infinity" => Some(f64::INFINITY),
        _ => v.parse().ok(),
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}
