//! Pretraining loop: warmup-cosine AdamW over the configured objective.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use magma_tensor::{Tape, Tensor};
use serde::Serialize;

use crate::data::{augmented_batch, batch_iter, AugmentConfig, Dataset, NormStats};
use crate::error::{config_err, MagmaError, Result};
use crate::eval::{extract_features, knn_accuracy, FeatureKind};
use crate::manifold_reg::RegConfig;
use crate::model::{decode_reconstruct, encode, make_mask_keyed, patchify, VitMaeModel};
use crate::objectives::{methods, total_loss, LossBreakdown, LossInputs, ObjectiveOptions, Schedule};

/// Linear warmup from zero to `lr_peak`, then half-cosine decay to zero.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, lr_peak: f64) -> f64 {
    LrSchedule {
        peak: lr_peak,
        warmup_start: 0.0,
        warmup_steps,
        total_steps,
    }
    .at(step)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    /// Learning rate at step 0 of the warmup ramp.
    pub warmup_start: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return self.warmup_start + (self.peak - self.warmup_start) * f;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

// ── AdamW ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub hyper: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
}

impl OptimState {
    pub fn new(params: &[(String, Tensor)], hyper: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            hyper,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Only matrix weights decay; biases, norm gains and tokens do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// One decoupled-weight-decay Adam update with bias correction.
pub fn adamw_step(params: &mut [(String, Tensor)], grads: &[Vec<f64>], state: &mut OptimState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(MagmaError::Contract(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(MagmaError::NonFinite {
            what: "gradient",
            step: state.step,
        });
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - h.beta1.powi(t), 1.0 - h.beta2.powi(t));
    for (i, (name, p)) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.numel() {
            return Err(MagmaError::Contract(format!("gradient for {name} has wrong length")));
        }
        let shrink = if decays(name) { 1.0 - lr * h.weight_decay } else { 1.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + h.eps);
            *x = *x * shrink - lr * update;
        }
    }
    Ok(())
}

// ── Pretraining ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: String,
    pub reg: RegConfig,
    pub schedule: Schedule,
    pub objective: ObjectiveOptions,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Online kNN every this many epochs (0 disables it).
    pub probe_interval: usize,
    pub knn_k: usize,
    /// Intermediate checkpoint every this many epochs (0 disables them).
    pub checkpoint_interval: usize,
    /// Record wall-clock throughput; off makes metrics bit-reproducible.
    pub log_timing: bool,
}

impl TrainConfig {
    pub fn validate(&self, model: &VitMaeModel) -> Result<()> {
        methods().get(&self.method)?;
        self.reg.validate(model.config().enc_depth)?;
        self.schedule.validate()?;
        self.augment.validate()?;
        if self.augment.output_size != model.config().image_size {
            return config_err(format!(
                "augment output_size {} differs from image_size {}",
                self.augment.output_size,
                model.config().image_size
            ));
        }
        if self.epochs == 0 {
            return config_err("epochs must be at least 1");
        }
        if self.batch_size < 2 {
            return config_err(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr_peak > 0.0) || !(self.warmup_start_lr >= 0.0) {
            return config_err("learning rates must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return config_err(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.knn_k == 0 {
            return config_err("knn_k must be at least 1");
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_reg: f64,
    pub loss_unif: f64,
    pub lambda_eff: f64,
    pub lr: f64,
    pub imgs_per_sec: Option<f64>,
    pub online_knn: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
}

/// Held-out split for the online kNN diagnostic.
pub struct OnlineEval<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

struct Outputs<'a> {
    dir: &'a Path,
    metrics: BufWriter<File>,
}

fn average(sum: &LossBreakdown, n: usize) -> LossBreakdown {
    let n = n as f64;
    LossBreakdown {
        total: sum.total / n,
        reconstruction: sum.reconstruction / n,
        regularizer: sum.regularizer / n,
        uniformity: sum.uniformity / n,
        effective_lambda: sum.effective_lambda / n,
    }
}

/// Runs pretraining in place on `model`. With `out_dir`, writes
/// `metrics.jsonl`, periodic `checkpoint_epoch{e}.mgwt` and `final.mgwt`;
/// on a non-finite loss the weights from before the failing step are saved
/// as `last_good.mgwt` and the run aborts.
pub fn pretrain(
    model: &mut VitMaeModel,
    ds: &Dataset,
    cfg: &TrainConfig,
    online: Option<OnlineEval<'_>>,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate(model)?;
    let method = methods().get(&cfg.method)?;
    let steps_per_epoch = batch_iter(ds.len(), cfg.batch_size, cfg.seed, 0, true)?.len();
    let lr = LrSchedule {
        peak: cfg.lr_peak,
        warmup_start: cfg.warmup_start_lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut outputs = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(Outputs {
                dir,
                metrics: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
            })
        }
        None => None,
    };
    let mut state = OptimState::new(model.params(), cfg.adamw);
    let vit = model.config().clone();
    let mut report = TrainReport {
        metrics: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut sum = LossBreakdown {
            total: 0.0,
            reconstruction: 0.0,
            regularizer: 0.0,
            uniformity: 0.0,
            effective_lambda: 0.0,
        };
        let mut last_lr = 0.0;
        let batches = batch_iter(ds.len(), cfg.batch_size, cfg.seed, epoch, true)?;
        let mut images_seen = 0;
        for (s, ids) in batches.iter().enumerate() {
            let step_lr = lr.at(report.steps);
            let images = augmented_batch(ds, ids, &cfg.augment, cfg.seed, epoch)?;
            let target = patchify(&images, &vit)?;
            let plan = make_mask_keyed(cfg.seed, epoch, s, ids.len(), vit.num_patches(), vit.mask_ratio)?;
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let enc = encode(&images, &plan, model, &bound)?;
            let pred = decode_reconstruct(&enc, &plan, model, &bound)?;
            let inputs = LossInputs {
                pred,
                target: &target,
                plan: &plan,
                encoded: &enc,
            };
            let (loss, parts) = total_loss(&inputs, method, &cfg.reg, &cfg.schedule, epoch, &cfg.objective)?;
            if !parts.total.is_finite() {
                if let Some(o) = &outputs {
                    model.save(&o.dir.join("last_good.mgwt"))?;
                }
                return Err(MagmaError::NonFinite {
                    what: "loss",
                    step: report.steps,
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Vec<f64>> = bound.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
            drop(bound);
            adamw_step(model.params_mut(), &g, &mut state, step_lr)?;
            sum.total += parts.total;
            sum.reconstruction += parts.reconstruction;
            sum.regularizer += parts.regularizer;
            sum.uniformity += parts.uniformity;
            sum.effective_lambda += parts.effective_lambda;
            last_lr = step_lr;
            images_seen += ids.len();
            report.steps += 1;
        }
        let elapsed = started.elapsed().as_secs_f64();
        let avg = average(&sum, batches.len());
        let online_knn = match &online {
            Some(o) if cfg.probe_interval > 0 && ((epoch + 1) % cfg.probe_interval == 0 || epoch + 1 == cfg.epochs) => {
                Some(online_knn(model, o, &cfg.augment.stats, cfg.knn_k)?)
            }
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            loss_total: avg.total,
            loss_rec: avg.reconstruction,
            loss_reg: avg.regularizer,
            loss_unif: avg.uniformity,
            lambda_eff: avg.effective_lambda,
            lr: last_lr,
            imgs_per_sec: cfg.log_timing.then(|| images_seen as f64 / elapsed.max(1e-12)),
            online_knn,
        };
        if let Some(o) = &mut outputs {
            let line = serde_json::to_string(&m).map_err(|e| MagmaError::Contract(e.to_string()))?;
            writeln!(o.metrics, "{line}")?;
            o.metrics.flush()?;
            if cfg.checkpoint_interval > 0 && (epoch + 1) % cfg.checkpoint_interval == 0 {
                model.save(&o.dir.join(format!("checkpoint_epoch{}.mgwt", epoch + 1)))?;
            }
        }
        report.metrics.push(m);
    }
    if let Some(o) = &outputs {
        model.save(&o.dir.join("final.mgwt"))?;
    }
    Ok(report)
}

fn online_knn(model: &VitMaeModel, o: &OnlineEval<'_>, stats: &NormStats, k: usize) -> Result<f64> {
    let train = extract_features(model, o.train, stats, FeatureKind::PooledPatches)?;
    let test = extract_features(model, o.test, stats, FeatureKind::PooledPatches)?;
    knn_accuracy(&train, &o.train.labels, &test, &o.test.labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_endpoints() {
        assert_eq!(lr_at(0, 100, 10, 1.0), 0.0);
        assert_eq!(lr_at(10, 100, 10, 1.0), 1.0);
        assert!((lr_at(55, 100, 10, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn first_adam_step_is_lr() {
        let mut p = vec![("x.bias".to_string(), Tensor::scalar(2.0))];
        let mut st = OptimState::new(&p, AdamWConfig::default());
        adamw_step(&mut p, &[vec![1.0]], &mut st, 0.1).unwrap();
        let expect = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].1.item() - expect).abs() < 1e-12);
    }
}
