//! Frozen-encoder evaluation: features, linear probe, kNN, Davies-Bouldin
//! index, PCA key maps and attention maps.

use std::fmt::Write as _;
use std::path::Path;

use magma_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::{eval_batch, Dataset, NormStats};
use crate::error::{config_err, MagmaError, Result};
use crate::manifold_reg::pool_patches;
use crate::model::{encode, Encoded, MaskPlan, VitMaeModel};
use crate::rng::{self, domain};

const EXTRACT_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// Mean of the last block's patch tokens (class token excluded).
    PooledPatches,
    /// The last block's class token.
    ClassToken,
}

/// Runs `f` on full-grid encodings of `ds`, batch by batch.
fn for_each_encoding<F>(model: &VitMaeModel, ds: &Dataset, stats: &NormStats, mut f: F) -> Result<()>
where
    F: FnMut(&Encoded<'_>) -> Result<()>,
{
    let cfg = model.config();
    if ds.channels != cfg.channels {
        return Err(MagmaError::Data(format!(
            "dataset has {} channels, model expects {}",
            ds.channels, cfg.channels
        )));
    }
    let ids: Vec<usize> = (0..ds.len()).collect();
    for chunk in ids.chunks(EXTRACT_BATCH) {
        let images = eval_batch(ds, chunk, cfg.image_size, stats)?;
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let plan = MaskPlan::full(chunk.len(), cfg.num_patches());
        f(&encode(&images, &plan, model, &bound)?)?;
    }
    Ok(())
}

/// `[N×D]` features of every sample, unmasked.
pub fn extract_features(model: &VitMaeModel, ds: &Dataset, stats: &NormStats, kind: FeatureKind) -> Result<Tensor> {
    let cfg = model.config();
    if kind == FeatureKind::ClassToken && !cfg.use_class_token {
        return config_err("class-token features need use_class_token=true");
    }
    let mut data = Vec::with_capacity(ds.len() * cfg.enc_dim);
    for_each_encoding(model, ds, stats, |enc| {
        let last = *enc.blocks.last().expect("at least one block");
        let feats = match kind {
            FeatureKind::PooledPatches => pool_patches(last, enc.has_class_token)?,
            FeatureKind::ClassToken => last.narrow(1, 0, 1)?,
        };
        data.extend_from_slice(feats.value().data());
        Ok(())
    })?;
    Ok(Tensor::new(vec![ds.len(), cfg.enc_dim], data)?)
}

// ── Linear probe ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            milestones: vec![60, 80],
            gamma: 0.1,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return config_err("probe epochs and batch size must be positive");
        }
        if !(self.lr > 0.0) {
            return config_err(format!("probe lr must be positive, got {}", self.lr));
        }
        if let Some(m) = self.milestones.iter().find(|&&m| m >= self.epochs) {
            return config_err(format!("probe milestone {m} not below epochs {}", self.epochs));
        }
        Ok(())
    }
}

/// Step decay: `lr · gamma^(number of milestones ≤ epoch)`.
pub fn probe_lr_at(epoch: usize, pcfg: &ProbeConfig) -> f64 {
    let passed = pcfg.milestones.iter().filter(|&&m| epoch >= m).count();
    pcfg.lr * pcfg.gamma.powi(passed as i32)
}

/// Per-dimension mean and std of the training features; the probe sees
/// standardized inputs.
fn standardizer(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let std = var.iter().map(|v| (v / n as f64).sqrt().max(1e-6)).collect();
    (mean, std)
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let d = mean.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % d]) / std[i % d])
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn check_labels(labels: &[u16], class_count: usize) -> Result<()> {
    match labels.iter().find(|&&l| usize::from(l) >= class_count) {
        Some(l) => Err(MagmaError::Data(format!("label {l} out of range for {class_count} classes"))),
        None => Ok(()),
    }
}

/// Trains a softmax-regression layer with plain SGD and returns top-1
/// accuracy on the test features.
pub fn linear_probe(
    train: &Tensor,
    train_labels: &[u16],
    test: &Tensor,
    test_labels: &[u16],
    class_count: usize,
    pcfg: &ProbeConfig,
) -> Result<f64> {
    pcfg.validate()?;
    check_labels(train_labels, class_count)?;
    check_labels(test_labels, class_count)?;
    let (n, d) = (train.shape()[0], train.shape()[1]);
    if n != train_labels.len() || test.shape()[0] != test_labels.len() || test.shape()[1] != d {
        return Err(MagmaError::Contract("feature and label counts disagree".into()));
    }
    let (mean, std) = standardizer(train);
    let (xtr, xte) = (standardize(train, &mean, &std), standardize(test, &mean, &std));
    let mut w = Tensor::zeros(&[d, class_count]);
    let mut b = Tensor::zeros(&[class_count]);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..pcfg.epochs {
        let lr = probe_lr_at(epoch, pcfg);
        order.shuffle(&mut rng::stream(pcfg.seed, &[domain::PROBE, epoch as u64]));
        for chunk in order.chunks(pcfg.batch_size) {
            let mut x = Vec::with_capacity(chunk.len() * d);
            let mut onehot = vec![0.0; chunk.len() * class_count];
            for (r, &i) in chunk.iter().enumerate() {
                x.extend_from_slice(xtr.row(i));
                onehot[r * class_count + usize::from(train_labels[i])] = -1.0 / chunk.len() as f64;
            }
            let tape = Tape::new();
            let wv = tape.leaf(w.clone(), true);
            let bv = tape.leaf(b.clone(), true);
            let xv = tape.constant(Tensor::new(vec![chunk.len(), d], x)?);
            let logp = xv.linear(&wv, Some(&bv))?.log_softmax()?;
            let loss = logp
                .mul(&tape.constant(Tensor::new(vec![chunk.len(), class_count], onehot)?))?
                .sum()?;
            let g = tape.backward(loss)?;
            let (gw, gb) = (g.get_or_zeros(wv), g.get_or_zeros(bv));
            w.data_mut().iter_mut().zip(&gw).for_each(|(p, g)| *p -= lr * g);
            b.data_mut().iter_mut().zip(&gb).for_each(|(p, g)| *p -= lr * g);
        }
    }
    let mut correct = 0;
    for (i, &label) in test_labels.iter().enumerate() {
        let row = xte.row(i);
        let score = |c: usize| b.data()[c] + (0..d).map(|j| row[j] * w.data()[j * class_count + c]).sum::<f64>();
        let pred = (0..class_count)
            .map(|c| (c, score(c)))
            .fold((0, f64::NEG_INFINITY), |best, (c, s)| if s > best.1 { (c, s) } else { best });
        correct += usize::from(pred.0 == usize::from(label));
    }
    Ok(correct as f64 / test_labels.len().max(1) as f64)
}

// ── kNN ──────────────────────────────────────────────────────────────

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority vote among the `k` nearest training points (Euclidean; equal
/// distances ordered by training index). Vote ties go to the class with the
/// smallest summed distance, then the lowest class index. A test point that
/// also appears in the training set counts as its own neighbour.
pub fn knn_classify(train: &Tensor, train_labels: &[u16], test: &Tensor, k: usize) -> Result<Vec<u16>> {
    let n = train.shape()[0];
    if train_labels.is_empty() || n != train_labels.len() {
        return Err(MagmaError::Contract(format!(
            "kNN needs a non-empty training set with one label per row ({n} rows, {} labels)",
            train_labels.len()
        )));
    }
    if k == 0 || k > n {
        return Err(MagmaError::Config(format!("k={k} must lie in [1, {n}]")));
    }
    if test.shape()[1] != train.shape()[1] {
        return Err(MagmaError::Contract("train and test feature widths differ".into()));
    }
    let classes = usize::from(*train_labels.iter().max().unwrap()) + 1;
    let mut preds = Vec::with_capacity(test.shape()[0]);
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for q in 0..test.shape()[0] {
        let query = test.row(q);
        dists.clear();
        dists.extend((0..n).map(|i| (sq_dist(train.row(i), query).sqrt(), i)));
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![(0usize, 0.0f64); classes];
        for &(dist, i) in &dists[..k] {
            let v = &mut votes[usize::from(train_labels[i])];
            v.0 += 1;
            v.1 += dist;
        }
        let mut best = 0;
        for c in 1..classes {
            let (bc, bd) = votes[best];
            let (cc, cd) = votes[c];
            if cc > bc || (cc == bc && cd < bd) {
                best = c;
            }
        }
        preds.push(best as u16);
    }
    Ok(preds)
}

pub fn knn_accuracy(train: &Tensor, train_labels: &[u16], test: &Tensor, test_labels: &[u16], k: usize) -> Result<f64> {
    let preds = knn_classify(train, train_labels, test, k)?;
    let correct = preds.iter().zip(test_labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / test_labels.len().max(1) as f64)
}

// ── Davies-Bouldin ───────────────────────────────────────────────────

/// Mean over classes of `max_{j≠i} (S_i + S_j) / M_ij`. Classes with no
/// samples are ignored; coincident centroids give `+∞`.
pub fn davies_bouldin(feats: &Tensor, labels: &[u16]) -> Result<f64> {
    let d = feats.shape()[1];
    let classes = labels.iter().map(|&l| usize::from(l) + 1).max().unwrap_or(0);
    let mut count = vec![0usize; classes];
    let mut centroid = vec![vec![0.0; d]; classes];
    for (i, &l) in labels.iter().enumerate() {
        let c = usize::from(l);
        count[c] += 1;
        centroid[c].iter_mut().zip(feats.row(i)).for_each(|(a, v)| *a += v);
    }
    let present: Vec<usize> = (0..classes).filter(|&c| count[c] > 0).collect();
    if present.len() < 2 {
        return Err(MagmaError::Degenerate("Davies-Bouldin index needs at least two classes".into()));
    }
    for &c in &present {
        centroid[c].iter_mut().for_each(|a| *a /= count[c] as f64);
    }
    let mut scatter = vec![0.0; classes];
    for (i, &l) in labels.iter().enumerate() {
        let c = usize::from(l);
        scatter[c] += sq_dist(feats.row(i), &centroid[c]).sqrt();
    }
    for &c in &present {
        scatter[c] /= count[c] as f64;
    }
    let mut total = 0.0;
    for &i in &present {
        let mut worst = 0.0f64;
        for &j in &present {
            if i == j {
                continue;
            }
            let m = sq_dist(&centroid[i], &centroid[j]).sqrt();
            let r = if m == 0.0 { f64::INFINITY } else { (scatter[i] + scatter[j]) / m };
            worst = worst.max(r);
        }
        total += worst;
    }
    Ok(total / present.len() as f64)
}

// ── PCA maps ─────────────────────────────────────────────────────────

pub const POWER_TOL: f64 = 1e-12;
pub const POWER_MAX_ITERS: usize = 100_000;

/// Leading eigenpair of a symmetric `n×n` matrix. Converged when
/// `||Av − λv|| ≤ tol · max(|λ|, 1)`. The returned vector has unit norm and
/// its largest-magnitude entry positive.
pub fn power_iteration(a: &[f64], n: usize, tol: f64, max_iters: usize) -> Result<(f64, Vec<f64>)> {
    let matvec = |v: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum())
            .collect()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Deterministic start with no special alignment to coordinate axes.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let av = matvec(&v);
        let lambda: f64 = av.iter().zip(&v).map(|(x, y)| x * y).sum();
        residual = norm(&av.iter().zip(&v).map(|(x, y)| x - lambda * y).collect::<Vec<_>>());
        if residual <= tol * lambda.abs().max(1.0) {
            return Ok((lambda, canonical_sign(v)));
        }
        let na = norm(&av);
        if na == 0.0 {
            return Ok((0.0, canonical_sign(v)));
        }
        v = av.into_iter().map(|x| x / na).collect();
    }
    Err(MagmaError::NonConvergence { residual })
}

fn canonical_sign(mut v: Vec<f64>) -> Vec<f64> {
    let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Bilinear upsampling of a `g×g` grid to `s×s` with half-pixel centres.
pub fn upsample_bilinear(grid: &[f64], g: usize, s: usize) -> Vec<f64> {
    let coord = |o: usize| {
        let src = ((o as f64 + 0.5) * g as f64 / s as f64 - 0.5).clamp(0.0, (g - 1) as f64);
        let i0 = src.floor() as usize;
        (i0, (i0 + 1).min(g - 1), src - i0 as f64)
    };
    let mut out = Vec::with_capacity(s * s);
    for y in 0..s {
        let (y0, y1, fy) = coord(y);
        for x in 0..s {
            let (x0, x1, fx) = coord(x);
            let top = grid[y0 * g + x0] * (1.0 - fx) + grid[y0 * g + x1] * fx;
            let bot = grid[y1 * g + x0] * (1.0 - fx) + grid[y1 * g + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct LayerPca {
    /// 1-based encoder block.
    pub layer: usize,
    pub eigenvalue: f64,
    /// Per image: projections on the patch grid `[g×g]`.
    pub grids: Vec<Tensor>,
    /// Per image: the grid upsampled to `[S×S]`.
    pub maps: Vec<Tensor>,
}

/// Leading principal component of the per-patch key vectors of each block,
/// pooled over `images` (`[N×C×S×S]`), projected back onto each image.
pub fn pca_layer_maps(model: &VitMaeModel, images: &Tensor) -> Result<Vec<LayerPca>> {
    let cfg = model.config();
    let (n, d, g) = (images.shape()[0], cfg.enc_dim, cfg.grid());
    let p = cfg.num_patches();
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let enc = encode(images, &MaskPlan::full(n, p), model, &bound)?;
    let offset = usize::from(enc.has_class_token);
    let mut out = Vec::with_capacity(cfg.enc_depth);
    for (l, qkv) in enc.qkv.iter().enumerate() {
        let keys = qkv.narrow(2, d, d)?.narrow(1, offset, p)?.value();
        let rows = n * p;
        let mut mean = vec![0.0; d];
        for r in keys.data().chunks(d) {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let centered: Vec<f64> = keys.data().iter().enumerate().map(|(i, v)| v - mean[i % d]).collect();
        let mut cov = vec![0.0; d * d];
        for r in centered.chunks(d) {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += r[i] * r[j];
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= rows as f64);
        let (eigenvalue, v) = power_iteration(&cov, d, POWER_TOL, POWER_MAX_ITERS)?;
        let proj: Vec<f64> = centered
            .chunks(d)
            .map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let mut grids = Vec::with_capacity(n);
        let mut maps = Vec::with_capacity(n);
        for img in proj.chunks(p) {
            grids.push(Tensor::new(vec![g, g], img.to_vec())?);
            maps.push(Tensor::new(
                vec![cfg.image_size, cfg.image_size],
                upsample_bilinear(img, g, cfg.image_size),
            )?);
        }
        out.push(LayerPca {
            layer: l + 1,
            eigenvalue,
            grids,
            maps,
        });
    }
    Ok(out)
}

/// Class-token attention to every patch, per head of the last block, as
/// `[H×g×g]`. Also returns the full class-token rows `[H×T]`.
pub fn attention_maps(model: &VitMaeModel, image: &Tensor) -> Result<(Tensor, Tensor)> {
    let cfg = model.config();
    if !cfg.use_class_token {
        return config_err("attention maps need use_class_token=true");
    }
    if image.shape()[0] != 1 {
        return Err(MagmaError::Contract("attention maps take a single image".into()));
    }
    let (h, g, p) = (cfg.enc_heads, cfg.grid(), cfg.num_patches());
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let enc = encode(image, &MaskPlan::full(1, p), model, &bound)?;
    let attn = enc.attn.last().expect("at least one block").value();
    let t = p + 1;
    let mut rows = Vec::with_capacity(h * t);
    let mut maps = Vec::with_capacity(h * p);
    for head in 0..h {
        let row = &attn.data()[head * t * t..head * t * t + t];
        rows.extend_from_slice(row);
        maps.extend_from_slice(&row[1..]);
    }
    Ok((Tensor::new(vec![h, g, g], maps)?, Tensor::new(vec![h, t], rows)?))
}

// ── Output files ─────────────────────────────────────────────────────

/// `rows cols` header, then one line of space-separated values per row.
pub fn matrix_text(m: &Tensor) -> String {
    let (r, c) = match m.shape() {
        [r, c] => (*r, *c),
        s => (1, s.iter().product()),
    };
    let mut s = format!("{r} {c}\n");
    for row in m.data().chunks(c) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    std::fs::write(path, matrix_text(m))?;
    Ok(())
}

/// 8-bit binary PGM, min-max scaled; a constant matrix renders black.
pub fn pgm_bytes(m: &Tensor) -> Vec<u8> {
    let (r, c) = match m.shape() {
        [r, c] => (*r, *c),
        s => (1, s.iter().product()),
    };
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{c} {r}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&v| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(path: &Path, m: &Tensor) -> Result<()> {
    std::fs::write(path, pgm_bytes(m))?;
    Ok(())
}

/// Result of `probe` / `knn` commands.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub linear_acc: Option<f64>,
    pub knn_acc: Option<f64>,
    pub k: Option<usize>,
    pub dbi: f64,
    pub images_per_sec: Option<f64>,
    pub loss_curve: Vec<f64>,
}
