//! The training recipe as a flat `key = value` text file.
//!
//! Keys mirror the [`TrainConfig`] field names, with dotted prefixes for
//! nested records (`loss.w_dice`, `augment.p_flip_h`, `model.depth`, ...).
//! Lines starting with `#` are comments. Unknown keys are errors.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::optimizer::{RAdamParams, RangerParams, ScheduleSpec};
use crate::preprocess::PreprocessParams;
use crate::unet::{Activation, ModelSpec};

/// Aggregation level of reported DSC scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DscMode {
    /// Per-case DSC over the restacked 3D mask.
    Volume,
    /// Per-case mean of per-slice 2D DSCs.
    Slice,
}

/// Sampling scheme for the combined training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Balance {
    /// Plain concatenation of the training splits.
    None,
    /// Oversample smaller datasets so each contributes equally per epoch.
    Datasets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Stage-2 schedule restarts at `base_lr * stage2_lr_factor`.
    pub stage2_lr_factor: f64,
    pub batch_size: usize,
    pub flat_fraction: f64,
    pub final_lr: f64,
    pub optim: RangerParams,
    pub loss: LossWeights,
    pub augment: AugmentPolicy,
    pub model: ModelSpec,
    pub preprocess: PreprocessParams,
    pub dsc_mode: DscMode,
    pub eval_batch_size: usize,
    pub balance: Balance,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            base_lr: 1e-3,
            weight_decay: 0.01,
            epochs_stage1: 20,
            epochs_stage2: 20,
            stage2_lr_factor: 0.1,
            batch_size: 8,
            flat_fraction: 0.75,
            final_lr: 0.0,
            optim: RangerParams::default(),
            loss: LossWeights::default(),
            augment: AugmentPolicy::default(),
            model: ModelSpec::default(),
            preprocess: PreprocessParams::default(),
            dsc_mode: DscMode::Volume,
            eval_batch_size: 8,
            balance: Balance::None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true/false, got `{value}`"))),
    }
}

fn parse_grid(key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("`{key}`: expected ROWSxCOLS, got `{value}`")))?;
    Ok((parse_num(key, a.trim())?, parse_num(key, b.trim())?))
}

impl TrainConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.augment;
        let l = &self.loss;
        let m = &self.model;
        let o = &self.optim;
        let p = &self.preprocess;
        vec![
            ("seed", self.seed.to_string()),
            ("resolution", p.resolution.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs_stage1", self.epochs_stage1.to_string()),
            ("epochs_stage2", self.epochs_stage2.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("stage2_lr_factor", self.stage2_lr_factor.to_string()),
            ("schedule.flat_fraction", self.flat_fraction.to_string()),
            ("schedule.final_lr", self.final_lr.to_string()),
            ("optim.beta1", o.radam.beta1.to_string()),
            ("optim.beta2", o.radam.beta2.to_string()),
            ("optim.eps", o.radam.eps.to_string()),
            ("optim.lookahead_k", o.k.to_string()),
            ("optim.lookahead_alpha", o.alpha.to_string()),
            ("loss.w_dice", l.w_dice.to_string()),
            ("loss.w_focal", l.w_focal.to_string()),
            ("loss.w_ce", l.w_ce.to_string()),
            ("loss.focal_gamma", l.focal_gamma.to_string()),
            ("loss.focal_alpha", l.focal_alpha.to_string()),
            ("loss.dice_eps", l.dice_eps.to_string()),
            ("augment.max_rotation_deg", a.max_rotation_deg.to_string()),
            ("augment.max_translate_frac", a.max_translate_frac.to_string()),
            ("augment.p_flip_h", a.p_flip_h.to_string()),
            ("augment.p_flip_v", a.p_flip_v.to_string()),
            ("augment.p_rotate", a.p_rotate.to_string()),
            ("augment.p_translate", a.p_translate.to_string()),
            ("augment.brightness_jitter", a.brightness_jitter.to_string()),
            ("augment.contrast_jitter", a.contrast_jitter.to_string()),
            ("augment.p_brightness", a.p_brightness.to_string()),
            ("augment.p_contrast", a.p_contrast.to_string()),
            ("augment.noise_sigma", a.noise_sigma.to_string()),
            ("augment.p_noise", a.p_noise.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.base_channels", m.base_channels.to_string()),
            ("model.in_channels", m.in_channels.to_string()),
            ("model.out_classes", m.out_classes.to_string()),
            ("model.activation", m.activation.as_str().to_string()),
            ("model.norm_groups", m.norm_groups.to_string()),
            ("preprocess.clahe_clip_limit", p.clahe_clip_limit.to_string()),
            ("preprocess.clahe_grid", format!("{}x{}", p.clahe_grid.0, p.clahe_grid.1)),
            ("preprocess.skip_empty_slices", p.skip_empty_slices.to_string()),
            (
                "eval.dsc_mode",
                match self.dsc_mode {
                    DscMode::Volume => "volume",
                    DscMode::Slice => "slice",
                }
                .to_string(),
            ),
            ("eval.batch_size", self.eval_batch_size.to_string()),
            (
                "combined.balance",
                match self.balance {
                    Balance::None => "none",
                    Balance::Datasets => "datasets",
                }
                .to_string(),
            ),
        ]
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let k = key.trim();
        match k {
            "seed" => self.seed = parse_num(k, v)?,
            "resolution" => self.preprocess.resolution = parse_num(k, v)?,
            "batch_size" => self.batch_size = parse_num(k, v)?,
            "epochs_stage1" => self.epochs_stage1 = parse_num(k, v)?,
            "epochs_stage2" => self.epochs_stage2 = parse_num(k, v)?,
            "base_lr" => self.base_lr = parse_num(k, v)?,
            "weight_decay" => self.weight_decay = parse_num(k, v)?,
            "stage2_lr_factor" => self.stage2_lr_factor = parse_num(k, v)?,
            "schedule.flat_fraction" => self.flat_fraction = parse_num(k, v)?,
            "schedule.final_lr" => self.final_lr = parse_num(k, v)?,
            "optim.beta1" => self.optim.radam.beta1 = parse_num(k, v)?,
            "optim.beta2" => self.optim.radam.beta2 = parse_num(k, v)?,
            "optim.eps" => self.optim.radam.eps = parse_num(k, v)?,
            "optim.lookahead_k" => self.optim.k = parse_num(k, v)?,
            "optim.lookahead_alpha" => self.optim.alpha = parse_num(k, v)?,
            "loss.w_dice" => self.loss.w_dice = parse_num(k, v)?,
            "loss.w_focal" => self.loss.w_focal = parse_num(k, v)?,
            "loss.w_ce" => self.loss.w_ce = parse_num(k, v)?,
            "loss.focal_gamma" => self.loss.focal_gamma = parse_num(k, v)?,
            "loss.focal_alpha" => self.loss.focal_alpha = parse_num(k, v)?,
            "loss.dice_eps" => self.loss.dice_eps = parse_num(k, v)?,
            "augment.max_rotation_deg" => self.augment.max_rotation_deg = parse_num(k, v)?,
            "augment.max_translate_frac" => self.augment.max_translate_frac = parse_num(k, v)?,
            "augment.p_flip_h" => self.augment.p_flip_h = parse_num(k, v)?,
            "augment.p_flip_v" => self.augment.p_flip_v = parse_num(k, v)?,
            "augment.p_rotate" => self.augment.p_rotate = parse_num(k, v)?,
            "augment.p_translate" => self.augment.p_translate = parse_num(k, v)?,
            "augment.brightness_jitter" => self.augment.brightness_jitter = parse_num(k, v)?,
            "augment.contrast_jitter" => self.augment.contrast_jitter = parse_num(k, v)?,
            "augment.p_brightness" => self.augment.p_brightness = parse_num(k, v)?,
            "augment.p_contrast" => self.augment.p_contrast = parse_num(k, v)?,
            "augment.noise_sigma" => self.augment.noise_sigma = parse_num(k, v)?,
            "augment.p_noise" => self.augment.p_noise = parse_num(k, v)?,
            "model.depth" => self.model.depth = parse_num(k, v)?,
            "model.base_channels" => self.model.base_channels = parse_num(k, v)?,
            "model.in_channels" => self.model.in_channels = parse_num(k, v)?,
            "model.out_classes" => self.model.out_classes = parse_num(k, v)?,
            "model.activation" => {
                self.model.activation = Activation::parse(v)
                    .ok_or_else(|| Error::Config(format!("`{k}`: expected mish or relu, got `{v}`")))?
            }
            "model.norm_groups" => self.model.norm_groups = parse_num(k, v)?,
            "preprocess.clahe_clip_limit" => self.preprocess.clahe_clip_limit = parse_num(k, v)?,
            "preprocess.clahe_grid" => self.preprocess.clahe_grid = parse_grid(k, v)?,
            "preprocess.skip_empty_slices" => self.preprocess.skip_empty_slices = parse_bool(k, v)?,
            "eval.dsc_mode" => {
                self.dsc_mode = match v {
                    "volume" => DscMode::Volume,
                    "slice" => DscMode::Slice,
                    _ => return Err(Error::Config(format!("`{k}`: expected volume or slice, got `{v}`"))),
                }
            }
            "eval.batch_size" => self.eval_batch_size = parse_num(k, v)?,
            "combined.balance" => {
                self.balance = match v {
                    "none" => Balance::None,
                    "datasets" => Balance::Datasets,
                    _ => return Err(Error::Config(format!("`{k}`: expected none or datasets, got `{v}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    /// Parses file text on top of the defaults. Every bad line is reported.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut problems = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k, v) {
                        problems.push(format!("line {}: {}", i + 1, strip_prefix(&e)));
                    }
                }
                None => problems.push(format!("line {}: expected `key = value`", i + 1)),
            }
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Short hash of the resolved configuration text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn radam(&self) -> RAdamParams {
        RAdamParams {
            weight_decay: self.weight_decay,
            ..self.optim.radam
        }
    }

    pub fn ranger(&self) -> RangerParams {
        RangerParams {
            radam: self.radam(),
            ..self.optim
        }
    }

    pub fn schedule(&self, base_lr: f64, total_steps: usize) -> ScheduleSpec {
        ScheduleSpec {
            base_lr,
            total_steps,
            flat_fraction: self.flat_fraction,
            final_lr: self.final_lr.min(base_lr),
        }
    }

    /// Checks every field; all problems are listed in one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(strip_prefix(&e));
            }
        };
        if self.batch_size == 0 {
            check(Err(Error::Config("batch_size must be >= 1".into())));
        }
        if self.eval_batch_size == 0 {
            check(Err(Error::Config("eval.batch_size must be >= 1".into())));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            check(Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr))));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay * self.base_lr < 1.0) {
            check(Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay))));
        }
        if !(self.stage2_lr_factor > 0.0 && self.stage2_lr_factor <= 1.0) {
            check(Err(Error::Config(format!(
                "stage2_lr_factor must be in (0, 1], got {}",
                self.stage2_lr_factor
            ))));
        }
        check(self.schedule(self.base_lr, 1).validate());
        check(self.radam().validate());
        if self.optim.k == 0 || !(0.0..=1.0).contains(&self.optim.alpha) {
            check(Err(Error::Config("optim.lookahead_k must be >= 1 and alpha in [0, 1]".into())));
        }
        check(self.loss.validate());
        check(self.augment.validate());
        check(self.model.validate());
        check(self.preprocess.validate());
        let r = self.preprocess.resolution;
        check(self.model.check_input_dims(r, r).map_err(|e| Error::Config(strip_prefix(&e))));
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_is_lossless() {
        let mut cfg = TrainConfig::default();
        cfg.base_lr = 3.3e-4;
        cfg.augment.noise_sigma = 0.123456789;
        cfg.preprocess.clahe_grid = (4, 6);
        cfg.model.activation = Activation::Relu;
        cfg.dsc_mode = DscMode::Slice;
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn all_problems_reported() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        cfg.augment.p_noise = 2.0;
        cfg.preprocess.resolution = 100;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("batch_size"), "{msg}");
        assert!(msg.contains("p_noise"), "{msg}");
        assert!(msg.contains("divisible"), "{msg}");
    }

    #[test]
    fn parse_errors_name_lines() {
        let err = TrainConfig::parse("seed = 1\nbogus = 3\nbatch_size = x\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("bogus"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
        let cfg = TrainConfig::parse("# comment\n\nresolution = 64\n").unwrap();
        assert_eq!(cfg.preprocess.resolution, 64);
    }
}
