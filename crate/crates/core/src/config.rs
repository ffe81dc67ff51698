//! Flat `key = value` run configuration and the shipped presets.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{AugmentConfig, NormStats};
use crate::error::{MagmaError, Result};
use crate::eval::ProbeConfig;
use crate::manifold_reg::{KernelGrad, PairMode, RegConfig};
use crate::model::VitConfig;
use crate::objectives::{methods, ObjectiveOptions, Schedule};
use crate::train::{AdamWConfig, TrainConfig};

pub const PRESETS: &[(&str, &str)] = &[
    ("mae_tiny", include_str!("../presets/mae_tiny.cfg")),
    ("m_mae_tiny", include_str!("../presets/m_mae_tiny.cfg")),
    ("u_mae_tiny", include_str!("../presets/u_mae_tiny.cfg")),
    ("mu_mae_tiny", include_str!("../presets/mu_mae_tiny.cfg")),
    ("m_mae_cifar_like", include_str!("../presets/m_mae_cifar_like.cfg")),
];

pub fn preset(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            MagmaError::Config(format!("unknown preset '{name}' (available: {})", names.join(", ")))
        })
}

/// Every knob of a pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub adamw: AdamWConfig,
    pub vit: VitConfig,
    /// `None` selects the penultimate block.
    pub ref_layer: Option<usize>,
    /// `None` selects the last block.
    pub target_layer: Option<usize>,
    pub laplacian: String,
    pub kernel_grad: KernelGrad,
    pub pair_mode: PairMode,
    pub sigma_floor: f64,
    pub sigma: Option<f64>,
    pub schedule: Schedule,
    pub objective: ObjectiveOptions,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub hflip_prob: f64,
    /// `None` until computed from the training data.
    pub norm_mean: Option<Vec<f64>>,
    pub norm_std: Option<Vec<f64>>,
    pub train_data: Option<PathBuf>,
    pub eval_train_data: Option<PathBuf>,
    pub eval_test_data: Option<PathBuf>,
    pub probe_interval: usize,
    pub knn_k: usize,
    pub checkpoint_interval: usize,
    pub log_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: "m_mae".into(),
            seed: 0,
            epochs: 60,
            batch_size: 64,
            lr: 1e-3,
            warmup_epochs: 5,
            warmup_start_lr: 0.0,
            adamw: AdamWConfig::default(),
            vit: VitConfig::default(),
            ref_layer: None,
            target_layer: None,
            laplacian: "symmetric_normalized".into(),
            kernel_grad: KernelGrad::Flow,
            pair_mode: PairMode::SingleDirectedPair,
            sigma_floor: 1e-8,
            sigma: None,
            schedule: Schedule::default(),
            objective: ObjectiveOptions::default(),
            crop_scale_min: 0.08,
            crop_scale_max: 1.0,
            hflip_prob: 0.5,
            norm_mean: None,
            norm_std: None,
            train_data: None,
            eval_train_data: None,
            eval_test_data: None,
            probe_interval: 10,
            knn_k: 10,
            checkpoint_interval: 0,
            log_timing: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| MagmaError::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(MagmaError::Config(format!("{key}: expected true|false, got '{value}'"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Option<Vec<f64>>> {
    if value == "auto" {
        return Ok(None);
    }
    value.split(',').map(|v| parse(key, v.trim())).collect::<Result<Vec<f64>>>().map(Some)
}

fn parse_auto<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn fmt_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".into(), ToString::to_string)
}

fn fmt_list(v: &Option<Vec<f64>>) -> String {
    v.as_ref().map_or_else(
        || "auto".into(),
        |xs| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(","),
    )
}

fn fmt_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "method" => self.method = v.to_string(),
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "warmup_start_lr" => self.warmup_start_lr = parse(key, v)?,
            "beta1" => self.adamw.beta1 = parse(key, v)?,
            "beta2" => self.adamw.beta2 = parse(key, v)?,
            "adam_eps" => self.adamw.eps = parse(key, v)?,
            "weight_decay" => self.adamw.weight_decay = parse(key, v)?,
            "image_size" => self.vit.image_size = parse(key, v)?,
            "patch_size" => self.vit.patch_size = parse(key, v)?,
            "channels" => self.vit.channels = parse(key, v)?,
            "enc_depth" => self.vit.enc_depth = parse(key, v)?,
            "enc_dim" => self.vit.enc_dim = parse(key, v)?,
            "enc_heads" => self.vit.enc_heads = parse(key, v)?,
            "dec_depth" => self.vit.dec_depth = parse(key, v)?,
            "dec_dim" => self.vit.dec_dim = parse(key, v)?,
            "dec_heads" => self.vit.dec_heads = parse(key, v)?,
            "mlp_ratio" => self.vit.mlp_ratio = parse(key, v)?,
            "mask_ratio" => self.vit.mask_ratio = parse(key, v)?,
            "use_class_token" => self.vit.use_class_token = parse_bool(key, v)?,
            "ref_layer" => self.ref_layer = parse_auto(key, v)?,
            "target_layer" => self.target_layer = parse_auto(key, v)?,
            "laplacian" => self.laplacian = v.to_string(),
            "kernel_grad" => self.kernel_grad = v.parse().map_err(|e| prefix(key, e))?,
            "pair_mode" => self.pair_mode = v.parse().map_err(|e| prefix(key, e))?,
            "sigma_floor" => self.sigma_floor = parse(key, v)?,
            "sigma" => self.sigma = parse_auto(key, v)?,
            "lambda" => self.schedule.lambda = parse(key, v)?,
            "e_st" => self.schedule.e_st = parse(key, v)?,
            "e_dur" => self.schedule.e_dur = parse(key, v)?,
            "uniformity_weight" => self.schedule.uniformity_weight = parse(key, v)?,
            "normalize_targets" => self.objective.normalize_targets = parse_bool(key, v)?,
            "exclude_class_token" => self.objective.exclude_class_token = parse_bool(key, v)?,
            "log_regularizer" => self.objective.log_regularizer = parse_bool(key, v)?,
            "crop_scale_min" => self.crop_scale_min = parse(key, v)?,
            "crop_scale_max" => self.crop_scale_max = parse(key, v)?,
            "hflip_prob" => self.hflip_prob = parse(key, v)?,
            "norm_mean" => self.norm_mean = parse_list(key, v)?,
            "norm_std" => self.norm_std = parse_list(key, v)?,
            "train_data" => self.train_data = parse_path(v),
            "eval_train_data" => self.eval_train_data = parse_path(v),
            "eval_test_data" => self.eval_test_data = parse_path(v),
            "probe_interval" => self.probe_interval = parse(key, v)?,
            "knn_k" => self.knn_k = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            "log_timing" => self.log_timing = parse_bool(key, v)?,
            other => return Err(MagmaError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MagmaError::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key with its current value, in a fixed order; parsing the
    /// result reproduces `self`.
    pub fn to_text(&self) -> String {
        let a = &self.adamw;
        let v = &self.vit;
        let s = &self.schedule;
        let o = &self.objective;
        let entries: Vec<(&str, String)> = vec![
            ("method", self.method.clone()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("warmup_start_lr", format!("{:?}", self.warmup_start_lr)),
            ("beta1", format!("{:?}", a.beta1)),
            ("beta2", format!("{:?}", a.beta2)),
            ("adam_eps", format!("{:?}", a.eps)),
            ("weight_decay", format!("{:?}", a.weight_decay)),
            ("image_size", v.image_size.to_string()),
            ("patch_size", v.patch_size.to_string()),
            ("channels", v.channels.to_string()),
            ("enc_depth", v.enc_depth.to_string()),
            ("enc_dim", v.enc_dim.to_string()),
            ("enc_heads", v.enc_heads.to_string()),
            ("dec_depth", v.dec_depth.to_string()),
            ("dec_dim", v.dec_dim.to_string()),
            ("dec_heads", v.dec_heads.to_string()),
            ("mlp_ratio", v.mlp_ratio.to_string()),
            ("mask_ratio", format!("{:?}", v.mask_ratio)),
            ("use_class_token", v.use_class_token.to_string()),
            ("ref_layer", fmt_opt(&self.ref_layer)),
            ("target_layer", fmt_opt(&self.target_layer)),
            ("laplacian", self.laplacian.clone()),
            ("kernel_grad", self.kernel_grad.to_string()),
            ("pair_mode", self.pair_mode.to_string()),
            ("sigma_floor", format!("{:?}", self.sigma_floor)),
            ("sigma", self.sigma.map_or_else(|| "auto".into(), |x| format!("{x:?}"))),
            ("lambda", format!("{:?}", s.lambda)),
            ("e_st", s.e_st.to_string()),
            ("e_dur", s.e_dur.to_string()),
            ("uniformity_weight", format!("{:?}", s.uniformity_weight)),
            ("normalize_targets", o.normalize_targets.to_string()),
            ("exclude_class_token", o.exclude_class_token.to_string()),
            ("log_regularizer", o.log_regularizer.to_string()),
            ("crop_scale_min", format!("{:?}", self.crop_scale_min)),
            ("crop_scale_max", format!("{:?}", self.crop_scale_max)),
            ("hflip_prob", format!("{:?}", self.hflip_prob)),
            ("norm_mean", fmt_list(&self.norm_mean)),
            ("norm_std", fmt_list(&self.norm_std)),
            ("train_data", fmt_path(&self.train_data)),
            ("eval_train_data", fmt_path(&self.eval_train_data)),
            ("eval_test_data", fmt_path(&self.eval_test_data)),
            ("probe_interval", self.probe_interval.to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("log_timing", self.log_timing.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn reg_config(&self) -> RegConfig {
        let d = self.vit.enc_depth;
        RegConfig {
            ref_layer: self.ref_layer.unwrap_or(d.saturating_sub(1).max(1)),
            target_layer: self.target_layer.unwrap_or(d),
            laplacian: self.laplacian.clone(),
            kernel_grad: self.kernel_grad,
            pair_mode: self.pair_mode,
            sigma_floor: self.sigma_floor,
            fixed_sigma: self.sigma,
        }
    }

    pub fn norm_stats(&self) -> Option<NormStats> {
        match (&self.norm_mean, &self.norm_std) {
            (Some(m), Some(s)) => Some(NormStats {
                mean: m.clone(),
                std: s.clone(),
            }),
            _ => None,
        }
    }

    pub fn set_norm_stats(&mut self, stats: &NormStats) {
        self.norm_mean = Some(stats.mean.clone());
        self.norm_std = Some(stats.std.clone());
    }

    /// Training settings; requires resolved normalization statistics.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let stats = self
            .norm_stats()
            .ok_or_else(|| MagmaError::Config("norm_mean/norm_std not resolved".into()))?;
        let augment = AugmentConfig {
            scale_min: self.crop_scale_min,
            scale_max: self.crop_scale_max,
            hflip_prob: self.hflip_prob,
            ..AugmentConfig::new(self.vit.image_size, stats)
        };
        Ok(TrainConfig {
            method: self.method.clone(),
            reg: self.reg_config(),
            schedule: self.schedule.clone(),
            objective: self.objective,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_peak: self.lr,
            warmup_epochs: self.warmup_epochs,
            warmup_start_lr: self.warmup_start_lr,
            adamw: self.adamw,
            seed: self.seed,
            augment,
            probe_interval: self.probe_interval,
            knn_k: self.knn_k,
            checkpoint_interval: self.checkpoint_interval,
            log_timing: self.log_timing,
        })
    }

    /// Checks every field that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        methods().get(&self.method).map_err(|e| prefix("method", e))?;
        self.vit.validate()?;
        self.reg_config().validate(self.vit.enc_depth)?;
        self.schedule.validate()?;
        let probe = AugmentConfig {
            scale_min: self.crop_scale_min,
            scale_max: self.crop_scale_max,
            hflip_prob: self.hflip_prob,
            ..AugmentConfig::new(self.vit.image_size, NormStats { mean: vec![], std: vec![] })
        };
        probe.validate()?;
        if self.epochs == 0 {
            return Err(MagmaError::Config("epochs: must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(MagmaError::Config(format!("batch_size: must be at least 2, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0) {
            return Err(MagmaError::Config(format!("lr: must be positive, got {}", self.lr)));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(MagmaError::Config(format!(
                "warmup_epochs: {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.knn_k == 0 {
            return Err(MagmaError::Config("knn_k: must be at least 1".into()));
        }
        let c = self.vit.channels;
        for (key, v) in [("norm_mean", &self.norm_mean), ("norm_std", &self.norm_std)] {
            if let Some(xs) = v {
                if xs.len() != c {
                    return Err(MagmaError::Config(format!("{key}: expected {c} values, got {}", xs.len())));
                }
            }
        }
        if let Some(s) = &self.norm_std {
            if s.iter().any(|x| !(*x > 0.0)) {
                return Err(MagmaError::Config("norm_std: values must be positive".into()));
            }
        }
        Ok(())
    }
}

fn prefix(key: &str, e: MagmaError) -> MagmaError {
    match e {
        MagmaError::Config(m) => MagmaError::Config(format!("{key}: {m}")),
        other => other,
    }
}

/// Probe settings at desk scale; the schedule shape is unchanged.
pub fn default_probe(seed: u64) -> ProbeConfig {
    ProbeConfig {
        seed,
        ..ProbeConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::from_text(preset("m_mae_tiny").unwrap()).unwrap();
        c.set_norm_stats(&NormStats {
            mean: vec![0.1, 0.2, 0.30000000000000004],
            std: vec![0.5; 3],
        });
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = RunConfig::from_text("lamda = 1").unwrap_err();
        assert!(e.to_string().contains("unknown key 'lamda'"));
    }

    #[test]
    fn presets_validate() {
        for (name, text) in PRESETS {
            RunConfig::from_text(text)
                .and_then(|c| c.validate())
                .unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
