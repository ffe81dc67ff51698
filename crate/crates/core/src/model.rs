//! Small vision transformer with MAE-style masking.
//!
//! Parameter names are stable strings (`enc.block3.attn.qkv.weight`); block
//! indices are 1-based to match the regularizer's layer numbering.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use magma_tensor::{checkpoint, concat, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, MagmaError, Result};
use crate::rng::{self, domain};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub enc_depth: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub use_class_token: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            enc_depth: 4,
            enc_dim: 32,
            enc_heads: 4,
            dec_depth: 1,
            dec_dim: 32,
            dec_heads: 4,
            mlp_ratio: 4,
            mask_ratio: 0.75,
            use_class_token: true,
        }
    }
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn num_masked(&self) -> usize {
        (self.mask_ratio * self.num_patches() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("enc_depth", self.enc_depth),
            ("enc_heads", self.enc_heads),
            ("dec_depth", self.dec_depth),
            ("dec_heads", self.dec_heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (k, v) in positive {
            if v == 0 {
                return config_err(format!("{k} must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return config_err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        for (k, dim, heads) in [
            ("enc_dim", self.enc_dim, self.enc_heads),
            ("dec_dim", self.dec_dim, self.dec_heads),
        ] {
            // 2-D sin-cos embeddings split the width four ways.
            if dim == 0 || dim % 4 != 0 {
                return config_err(format!("{k}={dim} must be a positive multiple of 4"));
            }
            if dim % heads != 0 {
                return config_err(format!("{k}={dim} not divisible by {heads} heads"));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return config_err(format!("mask_ratio must lie in (0,1), got {}", self.mask_ratio));
        }
        let m = self.num_masked();
        if m == 0 || m >= self.num_patches() {
            return config_err(format!(
                "mask_ratio {} masks {m} of {} patches",
                self.mask_ratio,
                self.num_patches()
            ));
        }
        Ok(())
    }
}

// ── Patches ──────────────────────────────────────────────────────────

/// `[B×C×H×W]` → `[B×P×(patch·patch·C)]`; within a patch the order is
/// (row, column, channel).
pub fn patchify(images: &Tensor, cfg: &VitConfig) -> Result<Tensor> {
    let s = images.shape();
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if s.len() != 4 || s[1..] != want {
        return Err(magma_tensor::TensorError::Dimension {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: want.to_vec(),
        }
        .into());
    }
    let (b, c, size, p, g) = (s[0], cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid());
    let x = images.data();
    let mut out = Vec::with_capacity(x.len());
    for n in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            let (y, xx) = (gy * p + py, gx * p + px);
                            out.push(x[((n * c + ch) * size + y) * size + xx]);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![b, g * g, cfg.patch_dim()], out)?)
}

pub fn unpatchify(patches: &Tensor, cfg: &VitConfig) -> Result<Tensor> {
    let s = patches.shape();
    if s.len() != 3 || s[1] != cfg.num_patches() || s[2] != cfg.patch_dim() {
        return Err(magma_tensor::TensorError::Dimension {
            op: "unpatchify",
            lhs: s.to_vec(),
            rhs: vec![cfg.num_patches(), cfg.patch_dim()],
        }
        .into());
    }
    let (b, c, size, p, g) = (s[0], cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid());
    let mut out = vec![0.0; b * c * size * size];
    let mut it = patches.data().iter();
    for n in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            let (y, xx) = (gy * p + py, gx * p + px);
                            out[((n * c + ch) * size + y) * size + xx] = *it.next().unwrap();
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![b, c, size, size], out)?)
}

/// Fixed 2-D sin-cos table `[grid²×dim]`: the first half encodes the patch
/// row, the second half the column.
pub fn sincos_pos_embed(dim: usize, grid: usize) -> Tensor {
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            for pos in [r as f64, c as f64] {
                data.extend(omega.iter().map(|w| (pos * w).sin()));
                data.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    Tensor::new(vec![grid * grid, dim], data).expect("pos embed shape")
}

// ── Masking ──────────────────────────────────────────────────────────

/// Per-sample patch shuffle: the first `visible` entries of each row of
/// `ids_shuffle` are kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub ids_shuffle: Vec<Vec<usize>>,
    pub ids_restore: Vec<Vec<usize>>,
    pub visible: usize,
    /// `mask[b][p]` is true when patch `p` is hidden from the encoder.
    pub mask: Vec<Vec<bool>>,
}

impl MaskPlan {
    fn from_shuffles(ids_shuffle: Vec<Vec<usize>>, visible: usize) -> Self {
        let p = ids_shuffle.first().map_or(0, Vec::len);
        let mut ids_restore = Vec::with_capacity(ids_shuffle.len());
        let mut mask = Vec::with_capacity(ids_shuffle.len());
        for ids in &ids_shuffle {
            let mut restore = vec![0; p];
            let mut m = vec![true; p];
            for (pos, &patch) in ids.iter().enumerate() {
                restore[patch] = pos;
                if pos < visible {
                    m[patch] = false;
                }
            }
            ids_restore.push(restore);
            mask.push(m);
        }
        Self {
            ids_shuffle,
            ids_restore,
            visible,
            mask,
        }
    }

    /// No masking: every patch visible in natural order.
    pub fn full(b: usize, p: usize) -> Self {
        Self::from_shuffles(vec![(0..p).collect(); b], p)
    }

    pub fn batch(&self) -> usize {
        self.ids_shuffle.len()
    }

    pub fn num_patches(&self) -> usize {
        self.ids_shuffle.first().map_or(0, Vec::len)
    }

    pub fn num_masked(&self) -> usize {
        self.num_patches() - self.visible
    }

    pub fn visible_ids(&self) -> Vec<Vec<usize>> {
        self.ids_shuffle.iter().map(|ids| ids[..self.visible].to_vec()).collect()
    }
}

fn masked_count(p: usize, mask_ratio: f64) -> Result<usize> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return config_err(format!("mask_ratio must lie in (0,1), got {mask_ratio}"));
    }
    let m = (mask_ratio * p as f64).round() as usize;
    if m == 0 || m >= p {
        return config_err(format!("mask_ratio {mask_ratio} masks {m} of {p} patches"));
    }
    Ok(m)
}

fn shuffled<R: Rng>(rng: &mut R, p: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..p).collect();
    for i in (1..p).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    ids
}

/// Random masks for `b` samples drawn from one generator.
pub fn make_mask<R: Rng>(rng: &mut R, b: usize, p: usize, mask_ratio: f64) -> Result<MaskPlan> {
    let m = masked_count(p, mask_ratio)?;
    let ids = (0..b).map(|_| shuffled(rng, p)).collect();
    Ok(MaskPlan::from_shuffles(ids, p - m))
}

/// Random masks where sample `i` of the batch draws from its own stream
/// keyed by `(seed, epoch, step, i)`.
pub fn make_mask_keyed(
    seed: u64,
    epoch: usize,
    step: usize,
    b: usize,
    p: usize,
    mask_ratio: f64,
) -> Result<MaskPlan> {
    let m = masked_count(p, mask_ratio)?;
    let ids = (0..b)
        .map(|i| {
            let mut r = rng::stream(seed, &[domain::MASK, epoch as u64, step as u64, i as u64]);
            shuffled(&mut r, p)
        })
        .collect();
    Ok(MaskPlan::from_shuffles(ids, p - m))
}

// ── Parameters ───────────────────────────────────────────────────────

/// Parameter collection plus the fixed positional tables.
#[derive(Debug, Clone)]
pub struct VitMaeModel {
    cfg: VitConfig,
    params: Vec<(String, Tensor)>,
    index: Arc<HashMap<String, usize>>,
    enc_pos: Tensor,
    dec_pos: Tensor,
}

fn param_shapes(cfg: &VitConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let (d, dd, pd) = (cfg.enc_dim, cfg.dec_dim, cfg.patch_dim());
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
    push("enc.patch_embed.weight".into(), vec![pd, d]);
    push("enc.patch_embed.bias".into(), vec![d]);
    if cfg.use_class_token {
        push("enc.cls_token".into(), vec![1, d]);
    }
    let blocks = [("enc", cfg.enc_depth, d), ("dec", cfg.dec_depth, dd)];
    for (i, &(side, depth, width)) in blocks.iter().enumerate() {
        if i == 1 {
            push("dec.embed.weight".into(), vec![d, dd]);
            push("dec.embed.bias".into(), vec![dd]);
            push("dec.mask_token".into(), vec![1, dd]);
        }
        let hidden = width * cfg.mlp_ratio;
        for l in 1..=depth {
            let p = format!("{side}.block{l}");
            push(format!("{p}.norm1.gain"), vec![width]);
            push(format!("{p}.norm1.bias"), vec![width]);
            push(format!("{p}.attn.qkv.weight"), vec![width, 3 * width]);
            push(format!("{p}.attn.qkv.bias"), vec![3 * width]);
            push(format!("{p}.attn.proj.weight"), vec![width, width]);
            push(format!("{p}.attn.proj.bias"), vec![width]);
            push(format!("{p}.norm2.gain"), vec![width]);
            push(format!("{p}.norm2.bias"), vec![width]);
            push(format!("{p}.mlp.fc1.weight"), vec![width, hidden]);
            push(format!("{p}.mlp.fc1.bias"), vec![hidden]);
            push(format!("{p}.mlp.fc2.weight"), vec![hidden, width]);
            push(format!("{p}.mlp.fc2.bias"), vec![width]);
        }
        push(format!("{side}.norm.gain"), vec![width]);
        push(format!("{side}.norm.bias"), vec![width]);
    }
    push("dec.head.weight".into(), vec![dd, pd]);
    push("dec.head.bias".into(), vec![pd]);
    out
}

fn trunc_normal<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect()
}

impl VitMaeModel {
    /// Truncated-normal linear weights and tokens, zero biases, unit gains.
    pub fn init(cfg: &VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, &[domain::INIT]);
        let params = param_shapes(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".gain") {
                    vec![1.0; n]
                } else if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    trunc_normal(&mut r, n)
                };
                let t = Tensor::new(shape, data).expect("param shape").with_grad();
                (name, t)
            })
            .collect();
        Self::from_params(cfg, params)
    }

    fn from_params(cfg: &VitConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let index = Arc::new(
            params
                .iter()
                .enumerate()
                .map(|(i, (n, _))| (n.clone(), i))
                .collect(),
        );
        Ok(Self {
            cfg: cfg.clone(),
            params,
            index,
            enc_pos: sincos_pos_embed(cfg.enc_dim, cfg.grid()),
            dec_pos: sincos_pos_embed(cfg.dec_dim, cfg.grid()),
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].1)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter on `tape`; with `trainable` false they enter
    /// as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| if trainable { tape.param(t) } else { tape.constant(t.clone()) })
            .collect();
        Bound {
            vars,
            index: Arc::clone(&self.index),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)?;
        Ok(())
    }

    /// Loads a checkpoint whose names and shapes match `cfg` exactly.
    pub fn load(cfg: &VitConfig, path: &Path) -> Result<Self> {
        cfg.validate()?;
        let entries = checkpoint::load(path)
            .map_err(|e| MagmaError::Checkpoint(format!("{}: {e}", path.display())))?;
        let expected = param_shapes(cfg);
        if entries.len() != expected.len() {
            return Err(MagmaError::Checkpoint(format!(
                "{} holds {} tensors, config expects {}",
                path.display(),
                entries.len(),
                expected.len()
            )));
        }
        let mut params = Vec::with_capacity(entries.len());
        for ((name, t), (want, shape)) in entries.into_iter().zip(expected) {
            if name != want || t.shape() != shape.as_slice() {
                return Err(MagmaError::Checkpoint(format!(
                    "found {name} {:?}, expected {want} {shape:?}",
                    t.shape()
                )));
            }
            params.push((name, t.with_grad()));
        }
        Self::from_params(cfg, params)
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    index: Arc<HashMap<String, usize>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    /// Recorded parameters in model parameter order.
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

// ── Forward ──────────────────────────────────────────────────────────

/// Per-block outputs of the encoder.
#[derive(Debug, Clone)]
pub struct Encoded<'t> {
    /// Block outputs after the residual additions, before the final norm;
    /// `blocks[l-1]` is block `l`.
    pub blocks: Vec<Var<'t>>,
    /// Fused `[B×T×3D]` query/key/value projections per block.
    pub qkv: Vec<Var<'t>>,
    /// Attention probabilities `[B·H×T×T]` per block.
    pub attn: Vec<Var<'t>>,
    /// Output of the final encoder norm.
    pub final_norm: Var<'t>,
    pub has_class_token: bool,
}

struct BlockOut<'t> {
    out: Var<'t>,
    qkv: Var<'t>,
    attn: Var<'t>,
}

fn transformer_block<'t>(x: Var<'t>, p: &Bound<'t>, prefix: &str, heads: usize) -> Result<BlockOut<'t>> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let g = |n: &str| p.get(&format!("{prefix}.{n}"));

    let h = x.layer_norm(&g("norm1.gain"), &g("norm1.bias"), LN_EPS)?;
    let qkv = h.linear(&g("attn.qkv.weight"), Some(&g("attn.qkv.bias")))?;
    let split = qkv.reshape(&[b, t, 3, heads, dh])?.permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| -> Result<Var<'t>> { Ok(split.narrow(0, i, 1)?.reshape(&[b * heads, t, dh])?) };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let attn = q
        .bmm(&k.transpose()?)?
        .scale(1.0 / (dh as f64).sqrt())?
        .softmax()?;
    let mixed = attn
        .bmm(&v)?
        .reshape(&[b, heads, t, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, t, d])?;
    let x = x.add(&mixed.linear(&g("attn.proj.weight"), Some(&g("attn.proj.bias")))?)?;

    let h = x.layer_norm(&g("norm2.gain"), &g("norm2.bias"), LN_EPS)?;
    let h = h
        .linear(&g("mlp.fc1.weight"), Some(&g("mlp.fc1.bias")))?
        .gelu()?
        .linear(&g("mlp.fc2.weight"), Some(&g("mlp.fc2.bias")))?;
    Ok(BlockOut {
        out: x.add(&h)?,
        qkv,
        attn,
    })
}

fn check_plan(images: &Tensor, plan: &MaskPlan, cfg: &VitConfig) -> Result<()> {
    let b = images.shape()[0];
    if plan.batch() != b || plan.num_patches() != cfg.num_patches() {
        return Err(MagmaError::Contract(format!(
            "mask plan for {}×{} patches, batch has {b}×{}",
            plan.batch(),
            plan.num_patches(),
            cfg.num_patches()
        )));
    }
    Ok(())
}

/// Embeds the visible patches (plus class token) and runs the encoder.
pub fn encode<'t>(images: &Tensor, plan: &MaskPlan, model: &VitMaeModel, p: &Bound<'t>) -> Result<Encoded<'t>> {
    let cfg = &model.cfg;
    check_plan(images, plan, cfg)?;
    let tape = p.get("enc.patch_embed.weight").tape();
    let b = plan.batch();
    let patches = tape.constant(patchify(images, cfg)?);
    let x = patches
        .linear(&p.get("enc.patch_embed.weight"), Some(&p.get("enc.patch_embed.bias")))?
        .add_broadcast(&tape.constant(model.enc_pos.clone()))?;
    let mut x = if plan.visible == plan.num_patches() && is_identity(plan) {
        x
    } else {
        x.gather_rows(&plan.visible_ids())?
    };
    if cfg.use_class_token {
        let cls = p.get("enc.cls_token").broadcast_to(&[b, 1, cfg.enc_dim])?;
        x = concat(&[cls, x], 1)?;
    }
    let mut enc = Encoded {
        blocks: Vec::with_capacity(cfg.enc_depth),
        qkv: Vec::with_capacity(cfg.enc_depth),
        attn: Vec::with_capacity(cfg.enc_depth),
        final_norm: x,
        has_class_token: cfg.use_class_token,
    };
    for l in 1..=cfg.enc_depth {
        let o = transformer_block(x, p, &format!("enc.block{l}"), cfg.enc_heads)?;
        x = o.out;
        enc.blocks.push(o.out);
        enc.qkv.push(o.qkv);
        enc.attn.push(o.attn);
    }
    enc.final_norm = x.layer_norm(&p.get("enc.norm.gain"), &p.get("enc.norm.bias"), LN_EPS)?;
    Ok(enc)
}

fn is_identity(plan: &MaskPlan) -> bool {
    plan.ids_shuffle
        .iter()
        .all(|ids| ids.iter().enumerate().all(|(i, &v)| i == v))
}

/// Reconstructs every patch `[B×P×patch_dim]` from the encoder output.
pub fn decode_reconstruct<'t>(
    enc: &Encoded<'t>,
    plan: &MaskPlan,
    model: &VitMaeModel,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    let cfg = &model.cfg;
    let s = enc.final_norm.shape();
    let offset = usize::from(enc.has_class_token);
    if s[0] != plan.batch() || s[1] != plan.visible + offset {
        return Err(MagmaError::Contract(format!(
            "encoded tokens {s:?} do not match plan ({} samples, {} visible)",
            plan.batch(),
            plan.visible
        )));
    }
    let tape = enc.final_norm.tape();
    let (b, np, dd) = (plan.batch(), plan.num_patches(), cfg.dec_dim);
    let y = enc
        .final_norm
        .linear(&p.get("dec.embed.weight"), Some(&p.get("dec.embed.bias")))?;
    let visible = if offset > 0 { y.narrow(1, 1, plan.visible)? } else { y };
    let mut seq = visible;
    if plan.num_masked() > 0 {
        let mask_tokens = p.get("dec.mask_token").reshape(&[dd])?.broadcast_to(&[b, plan.num_masked(), dd])?;
        seq = concat(&[visible, mask_tokens], 1)?;
    }
    let mut x = seq
        .gather_rows(&plan.ids_restore)?
        .add_broadcast(&tape.constant(model.dec_pos.clone()))?;
    if offset > 0 {
        x = concat(&[y.narrow(1, 0, 1)?, x], 1)?;
    }
    for l in 1..=cfg.dec_depth {
        x = transformer_block(x, p, &format!("dec.block{l}"), cfg.dec_heads)?.out;
    }
    let x = x.layer_norm(&p.get("dec.norm.gain"), &p.get("dec.norm.bias"), LN_EPS)?;
    let x = if offset > 0 { x.narrow(1, 1, np)? } else { x };
    Ok(x.linear(&p.get("dec.head.weight"), Some(&p.get("dec.head.bias")))?)
}
