//! Image container format, synthetic corpus, normalization statistics and
//! pretraining augmentations.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use magma_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, MagmaError, Result};
use crate::rng::{self, domain};

const MAGIC: &[u8; 4] = b"MGDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 28;
const STD_FLOOR: f64 = 1e-6;
const CROP_ATTEMPTS: usize = 10;
const CLASS_COLOR_AMPLITUDE: f64 = 25.0;
/// Per-channel colour jitter, below half the distance between class colours
/// so noiseless samples stay nearest their own class centroid.
const COLOR_JITTER: f64 = 14.0;

/// `N` images of `C×H×W` bytes (sample-major, channel-major) with labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_count: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        class_count: usize,
        images: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let ds = Self {
            height,
            width,
            channels,
            class_count,
            images,
            labels,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(MagmaError::Data("zero image extent".into()));
        }
        if self.images.len() != self.len() * self.image_len() {
            return Err(MagmaError::Data(format!(
                "{} image bytes for {} samples of {} bytes",
                self.images.len(),
                self.len(),
                self.image_len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| usize::from(l) >= self.class_count) {
            return Err(MagmaError::Data(format!(
                "label {bad} out of range for {} classes",
                self.class_count
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[usize::from(l)] += 1;
        }
        h
    }

    /// Samples `ids` in the given order.
    pub fn subset(&self, ids: &[usize]) -> Self {
        let mut images = Vec::with_capacity(ids.len() * self.image_len());
        for &i in ids {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            class_count: self.class_count,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            VERSION,
            self.len() as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            self.class_count as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.images)?;
        for l in &self.labels {
            w.write_all(&l.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(MagmaError::Data("not an MGDS container".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if field(0) != VERSION as usize {
            return Err(MagmaError::Data(format!("unsupported container version {}", field(0))));
        }
        let (n, h, w, c, k) = (field(1), field(2), field(3), field(4), field(5));
        let img = n * c * h * w;
        let body = &bytes[HEADER_LEN..];
        if body.len() != img + 2 * n {
            return Err(MagmaError::Data(format!(
                "payload is {} bytes, header implies {}",
                body.len(),
                img + 2 * n
            )));
        }
        let labels = body[img..]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        Self::new(h, w, c, k, body[..img].to_vec(), labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.images.len() + 2 * self.len());
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| MagmaError::Data(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Converts CIFAR-style binary records (`label_bytes` label bytes, the
    /// last of which is used, followed by a 3×32×32 channel-major image).
    pub fn from_cifar_records(bytes: &[u8], label_bytes: usize, class_count: usize) -> Result<Self> {
        let rec = label_bytes + 3 * 32 * 32;
        if label_bytes == 0 || bytes.len() % rec != 0 {
            return Err(MagmaError::Data(format!(
                "{} bytes is not a whole number of {rec}-byte records",
                bytes.len()
            )));
        }
        let mut images = Vec::with_capacity(bytes.len());
        let mut labels = Vec::new();
        for r in bytes.chunks_exact(rec) {
            labels.push(u16::from(r[label_bytes - 1]));
            images.extend_from_slice(&r[label_bytes..]);
        }
        Self::new(32, 32, 3, class_count, images, labels)
    }
}

// ── Synthetic corpus ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Standard deviation of the additive pixel noise, in 0..255 units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            class_count: 3,
            per_class: 200,
            image_size: 32,
            channels: 3,
            noise: 20.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.class_count > usize::from(u16::MAX) {
            return config_err(format!("classes must lie in [1, 65535], got {}", self.class_count));
        }
        if self.per_class == 0 {
            return config_err("per_class must be at least 1");
        }
        if self.image_size == 0 || self.channels == 0 {
            return config_err("image size and channels must be positive");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return config_err(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        Ok(())
    }
}

struct ClassStyle {
    color: Vec<f64>,
    freq: f64,
    angle: f64,
}

fn class_style(spec: &SynthSpec, k: usize) -> ClassStyle {
    let mut r = rng::stream(spec.seed, &[domain::SYNTH, 0, k as u64]);
    let hue = 2.0 * PI * k as f64 / spec.class_count as f64;
    let color = (0..spec.channels)
        .map(|c| 128.0 + CLASS_COLOR_AMPLITUDE * (hue + 2.0 * PI * c as f64 / 3.0).cos())
        .collect();
    ClassStyle {
        color,
        freq: 1.0 + (k % 4) as f64 + r.gen_range(0.0..0.5),
        angle: PI * (k as f64 * 0.618_033_988_75).fract() + r.gen_range(-0.1..0.1),
    }
}

/// Sample `i` belongs to class `i mod class_count`. Each class has a base
/// colour and a stripe frequency/orientation; samples add colour jitter,
/// a random stripe phase and Gaussian pixel noise.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let (k, s, c) = (spec.class_count, spec.image_size, spec.channels);
    let n = k * spec.per_class;
    let styles: Vec<ClassStyle> = (0..k).map(|j| class_style(spec, j)).collect();
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid noise");
    let mut images = Vec::with_capacity(n * c * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let st = &styles[class];
        let mut r = rng::stream(spec.seed, &[domain::SYNTH, 1, i as u64]);
        let jitter: Vec<f64> = (0..c).map(|_| r.gen_range(-COLOR_JITTER..COLOR_JITTER)).collect();
        let phase = r.gen_range(0.0..2.0 * PI);
        let (ca, sa) = (st.angle.cos(), st.angle.sin());
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 * ca + y as f64 * sa) / s as f64;
                    let mut v = st.color[ch] + jitter[ch] + 40.0 * (2.0 * PI * st.freq * u + phase).sin();
                    if spec.noise > 0.0 {
                        v += noise.sample(&mut r);
                    }
                    images.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(class as u16);
    }
    Dataset::new(s, s, c, k, images, labels)
}

// ── Normalization ────────────────────────────────────────────────────

/// Per-channel mean and standard deviation of pixel values scaled to [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Population statistics over every pixel of every sample.
pub fn compute_norm_stats(ds: &Dataset) -> Result<NormStats> {
    if ds.is_empty() {
        return Err(MagmaError::Data("cannot compute statistics of an empty dataset".into()));
    }
    let plane = ds.height * ds.width;
    let mut mean = Vec::with_capacity(ds.channels);
    let mut std = Vec::with_capacity(ds.channels);
    for c in 0..ds.channels {
        // Integer histogram keeps the result independent of sample order.
        let mut hist = [0u64; 256];
        for i in 0..ds.len() {
            for &v in &ds.image(i)[c * plane..(c + 1) * plane] {
                hist[usize::from(v)] += 1;
            }
        }
        let count = (ds.len() * plane) as f64;
        let mu = hist.iter().enumerate().map(|(v, &h)| v as f64 * h as f64).sum::<f64>() / count;
        let var = hist
            .iter()
            .enumerate()
            .map(|(v, &h)| (v as f64 - mu).powi(2) * h as f64)
            .sum::<f64>()
            / count;
        mean.push(mu / 255.0);
        std.push((var.sqrt() / 255.0).max(STD_FLOOR));
    }
    Ok(NormStats { mean, std })
}

// ── Augmentation ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub hflip_prob: f64,
    pub output_size: usize,
    pub stats: NormStats,
}

impl AugmentConfig {
    pub fn new(output_size: usize, stats: NormStats) -> Self {
        Self {
            scale_min: 0.08,
            scale_max: 1.0,
            ratio_min: 3.0 / 4.0,
            ratio_max: 4.0 / 3.0,
            hflip_prob: 0.5,
            output_size,
            stats,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return config_err(format!(
                "crop scale must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.scale_min, self.scale_max
            ));
        }
        if !(self.ratio_min > 0.0 && self.ratio_min <= self.ratio_max) {
            return config_err("crop aspect ratio bounds are invalid");
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return config_err(format!("hflip_prob must lie in [0,1], got {}", self.hflip_prob));
        }
        if self.output_size == 0 {
            return config_err("output_size must be positive");
        }
        Ok(())
    }
}

/// Crop window `(top, left, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Area fraction uniform in the scale range, log-uniform aspect ratio; up
/// to ten attempts, then a centre crop at the nearest admissible ratio.
pub fn sample_crop<R: Rng>(rng: &mut R, h: usize, w: usize, cfg: &AugmentConfig) -> Crop {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.ratio_min.ln(), cfg.ratio_max.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.gen_range(cfg.scale_min..=cfg.scale_max);
        let ratio = if lr0 < lr1 { rng.gen_range(lr0..lr1).exp() } else { cfg.ratio_min };
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && cw <= w && ch > 0 && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return Crop {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < cfg.ratio_min {
        (w, ((w as f64 / cfg.ratio_min).round() as usize).clamp(1, h))
    } else if in_ratio > cfg.ratio_max {
        (((h as f64 * cfg.ratio_max).round() as usize).clamp(1, w), h)
    } else {
        (w, h)
    };
    Crop {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

/// Bilinear resize of a crop of a `C×H×W` byte image to `C×S×S` values in
/// [0,1]. Sample points use half-pixel centres, clamped to the crop.
pub fn resize_bilinear(img: &[u8], c: usize, h: usize, w: usize, crop: Crop, size: usize) -> Vec<f64> {
    let axis = |len: usize, start: usize| -> Vec<(usize, usize, f64)> {
        (0..size)
            .map(|o| {
                let src = ((o as f64 + 0.5) * len as f64 / size as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (start + i0, start + i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(crop.height, crop.top);
    let xs = axis(crop.width, crop.left);
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        let px = |y: usize, x: usize| f64::from(plane[y * w + x]);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                let bot = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy) / 255.0);
            }
        }
    }
    out
}

/// Mirrors each row of a `C×S×S` image in place.
pub fn hflip(img: &mut [f64], c: usize, size: usize) {
    for row in img.chunks_mut(size).take(c * size) {
        row.reverse();
    }
}

fn normalize(img: &mut [f64], stats: &NormStats, size: usize) {
    let plane = size * size;
    for (c, chunk) in img.chunks_mut(plane).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}

/// Random resized crop, horizontal flip, normalization.
pub fn augment<R: Rng>(ds: &Dataset, i: usize, cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let crop = sample_crop(rng, ds.height, ds.width, cfg);
    let s = cfg.output_size;
    let mut img = resize_bilinear(ds.image(i), ds.channels, ds.height, ds.width, crop, s);
    let flip = rng.gen::<f64>() < cfg.hflip_prob;
    if flip {
        hflip(&mut img, ds.channels, s);
    }
    normalize(&mut img, &cfg.stats, s);
    img
}

/// Deterministic evaluation view: full-image resize plus normalization.
pub fn eval_transform(ds: &Dataset, i: usize, size: usize, stats: &NormStats) -> Vec<f64> {
    let crop = Crop {
        top: 0,
        left: 0,
        height: ds.height,
        width: ds.width,
    };
    let mut img = resize_bilinear(ds.image(i), ds.channels, ds.height, ds.width, crop, size);
    normalize(&mut img, stats, size);
    img
}

// ── Batching ─────────────────────────────────────────────────────────

/// Shuffled index batches for one epoch, keyed by `(seed, epoch)`.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: usize, drop_last: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return config_err(format!("batch_size must be at least 2, got {batch_size}"));
    }
    if batch_size > n {
        return config_err(format!("batch_size {batch_size} exceeds dataset size {n}"));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng::stream(seed, &[domain::SHUFFLE, epoch as u64]));
    Ok(ids
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Augmented `[B×C×S×S]` batch; sample `i` draws from the stream keyed by
/// `(seed, epoch, i)`.
pub fn augmented_batch(ds: &Dataset, ids: &[usize], cfg: &AugmentConfig, seed: u64, epoch: usize) -> Result<Tensor> {
    let s = cfg.output_size;
    let mut data = Vec::with_capacity(ids.len() * ds.channels * s * s);
    for &i in ids {
        let mut r = rng::stream(seed, &[domain::AUGMENT, epoch as u64, i as u64]);
        data.extend(augment(ds, i, cfg, &mut r));
    }
    Ok(Tensor::new(vec![ids.len(), ds.channels, s, s], data)?)
}

pub fn eval_batch(ds: &Dataset, ids: &[usize], size: usize, stats: &NormStats) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ids.len() * ds.channels * size * size);
    for &i in ids {
        data.extend(eval_transform(ds, i, size, stats));
    }
    Ok(Tensor::new(vec![ids.len(), ds.channels, size, size], data)?)
}
