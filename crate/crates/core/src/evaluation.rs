//! Segmentation-based evaluation of phantoms.
//!
//! A small patch classifier labels the center pixel of each `patch_size`
//! square. Its three valid convolutions have a receptive field of exactly one
//! patch, so dense inference over an edge-replicated image equals per-patch
//! inference at every pixel.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::losses::LOG_EPS;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::NetworkParams;
use crate::rng::SeedStream;
use crate::tape::{Tape, Var, LEAKY_SLOPE};
use crate::tensor::Tensor;

const PAPER_PATCHES: usize = 400_000;
const PAPER_AREA: usize = 512 * 512;
const INIT_STREAM: u64 = 0x5e6;
const ORDER_STREAM: u64 = 1 << 20;

pub const FIG_TP: [u8; 3] = [0, 0, 0];
pub const FIG_FP: [u8; 3] = [0, 255, 0];
pub const FIG_FN: [u8; 3] = [255, 0, 0];
pub const FIG_TN: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterConfig {
    /// Odd side length of the classified patch.
    pub patch_size: usize,
    /// Channels of the two hidden convolutions.
    pub hidden: (usize, usize),
    /// Patches per training set; `None` scales 400K by image area over 512².
    pub patches: Option<usize>,
    pub batch_size: usize,
    pub lr: f32,
    pub epochs: usize,
    pub threshold: f32,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            patch_size: 17,
            hidden: (8, 16),
            patches: None,
            batch_size: 32,
            lr: 1e-3,
            epochs: 2,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size.is_multiple_of(2) || self.patch_size < 13 {
            return Err(Error::Config(format!("patch_size must be odd and >= 13, got {}", self.patch_size)));
        }
        if self.hidden.0 == 0 || self.hidden.1 == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("segmenter sizes must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("segmenter lr must be > 0 and threshold in [0, 1]".into()));
        }
        if self.patches == Some(0) {
            return Err(Error::Config("patch budget must be positive".into()));
        }
        Ok(())
    }

    /// Kernel sizes of the three convolutions; they sum to `patch_size + 2`.
    pub fn kernels(&self) -> [usize; 3] {
        [7, 7, self.patch_size - 12]
    }

    pub fn halo(&self) -> usize {
        self.patch_size / 2
    }

    /// Patch budget for images of `height`×`width`.
    pub fn budget(&self, height: usize, width: usize) -> usize {
        self.patches.unwrap_or_else(|| ((PAPER_PATCHES * height * width) / PAPER_AREA).max(1))
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let [k1, k2, k3] = self.kernels();
        let (h1, h2) = self.hidden;
        let mut out = Vec::new();
        for (name, o, i, k) in [("seg/c1", h1, 3, k1), ("seg/c2", h2, h1, k2), ("seg/c3", 1, h2, k3)] {
            out.push((format!("{name}/kernel"), vec![o, i, k, k]));
            out.push((format!("{name}/bias"), vec![o]));
        }
        out
    }
}

/// One labelled training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Tensor,
    pub foreground: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter {
    pub config: SegmenterConfig,
    pub params: NetworkParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// Foreground probability, `[1, H, W]`.
    pub probability: Tensor,
    /// `probability >= threshold` as `{0, 1}`.
    pub binary: Tensor,
}

impl Segmenter {
    /// He-normal weights and zero biases from `seed`.
    pub fn init(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStream::new(seed, INIT_STREAM);
        let mut params = NetworkParams::new();
        for (name, shape) in config.layout() {
            let t = if name.ends_with("/kernel") {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| (rng.normal() * std) as f32).collect())?
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    fn forward(&self, tape: &mut Tape, bound: &crate::params::Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, name) in ["seg/c1", "seg/c2", "seg/c3"].iter().enumerate() {
            let k = bound.var(&format!("{name}/kernel"))?;
            let b = bound.var(&format!("{name}/bias"))?;
            h = tape.conv2d(h, k, b, 1, 0)?;
            h = if i < 2 { tape.leaky_relu(h, LEAKY_SLOPE) } else { tape.sigmoid(h) };
        }
        Ok(h)
    }

    /// Foreground probability of one patch's center pixel.
    pub fn patch_probability(&self, patch: &Tensor) -> Result<f32> {
        let p = self.config.patch_size;
        if patch.shape() != [3, p, p] {
            return Err(Error::shape("segment", format!("patch {:?}, expected [3, {p}, {p}]", patch.shape())));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(patch.clone());
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).item())
    }

    /// Dense per-pixel probability and thresholded map.
    pub fn segment(&self, image: &Tensor) -> Result<Segmentation> {
        let (c, _, _) = image.chw()?;
        if c != 3 {
            return Err(Error::shape("segment", format!("expected 3 channels, got {c}")));
        }
        let padded = pad_replicate(image, self.config.halo())?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(padded);
        let y = self.forward(&mut tape, &bound, x)?;
        let probability = tape.value(y).clone();
        let t = self.config.threshold;
        let binary = probability.map(|v| if v >= t { 1.0 } else { 0.0 });
        Ok(Segmentation { probability, binary })
    }
}

/// Pad each channel by `pad` pixels, repeating the border values.
pub fn pad_replicate(img: &Tensor, pad: usize) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("pad", "empty image"));
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * ph * pw];
    let src = img.data();
    for ch in 0..c {
        for y in 0..ph {
            let sy = y.saturating_sub(pad).min(h - 1);
            for x in 0..pw {
                let sx = x.saturating_sub(pad).min(w - 1);
                out[(ch * ph + y) * pw + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(vec![c, ph, pw], out)
}

fn crop_padded(padded: &Tensor, y: usize, x: usize, p: usize) -> Tensor {
    let (c, ph, pw) = (padded.shape()[0], padded.shape()[1], padded.shape()[2]);
    let mut out = Vec::with_capacity(c * p * p);
    for ch in 0..c {
        for r in y..y + p {
            let o = (ch * ph + r) * pw;
            out.extend_from_slice(&padded.data()[o + x..o + x + p]);
        }
    }
    Tensor::new(vec![c, p, p], out).expect("patch shape")
}

/// Draw `count` patches spread evenly over `pairs`, half centered on
/// foreground and half on background pixels inside each mask.
pub fn sample_patches(
    pairs: &[ImagePair],
    count: usize,
    config: &SegmenterConfig,
    rng: &mut SeedStream,
) -> Result<Vec<Patch>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = config.patch_size;
    let mut out = Vec::with_capacity(count);
    for (i, pair) in pairs.iter().enumerate() {
        let quota = count / pairs.len() + usize::from(i < count % pairs.len());
        let (_, h, w) = pair.segmentation.chw()?;
        let fg_map = pair.foreground();
        let inside = |k: usize| pair.mask.as_ref().is_none_or(|m| m.data()[k] > 0.5);
        let fg: Vec<usize> = (0..h * w).filter(|&k| inside(k) && fg_map[k]).collect();
        let bg: Vec<usize> = (0..h * w).filter(|&k| inside(k) && !fg_map[k]).collect();
        if fg.is_empty() && bg.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: mask is empty", pair.id)));
        }
        let padded = pad_replicate(&pair.image, config.halo())?;
        for j in 0..quota {
            let want_fg = (j % 2 == 0 && !fg.is_empty()) || bg.is_empty();
            let pool = if want_fg { &fg } else { &bg };
            let k = pool[rng.below(pool.len())];
            out.push(Patch { pixels: crop_padded(&padded, k / w, k % w, p), foreground: want_fg });
        }
    }
    Ok(out)
}

/// Binary cross-entropy training on a fixed patch set.
pub fn train_on_patches(patches: &[Patch], config: &SegmenterConfig, seed: u64) -> Result<Segmenter> {
    if patches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut seg = Segmenter::init(config.clone(), seed)?;
    let mut adam = AdamState::new(&seg.params);
    let cfg = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let mut order: Vec<usize> = (0..patches.len()).collect();
    for epoch in 0..config.epochs {
        SeedStream::new(seed, ORDER_STREAM + epoch as u64).shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = seg.params.bind(&mut tape, true);
            let mut total: Option<Var> = None;
            for &i in batch {
                let x = tape.constant(patches[i].pixels.clone());
                let prob = seg.forward(&mut tape, &bound, x)?;
                let q = if patches[i].foreground { prob } else { tape.scale_shift(prob, -1.0, 1.0) };
                let l = tape.clamped_log(q, LOG_EPS, 1.0 - LOG_EPS);
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let total = total.expect("non-empty batch");
            let s = tape.sum(total);
            let loss = tape.scale(s, -1.0 / batch.len() as f32);
            let grads = tape.backward(loss)?;
            adam_step(&mut seg.params, &bound.grads(&grads), &mut adam, &cfg)?;
        }
    }
    Ok(seg)
}

/// Sample the budgeted patch set from `pairs` and train on it.
pub fn train_segmenter(pairs: &[ImagePair], config: &SegmenterConfig, seed: u64) -> Result<Segmenter> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (_, h, w) = pairs[0].image.chw()?;
    let patches = sample_patches(pairs, config.budget(h, w), config, &mut SeedStream::new(seed, 0))?;
    train_on_patches(&patches, config, seed)
}

/// Fraction of patches whose center label is predicted correctly.
pub fn patch_accuracy(seg: &Segmenter, patches: &[Patch]) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut right = 0usize;
    for p in patches {
        let fg = seg.patch_probability(&p.pixels)? >= seg.config.threshold;
        right += usize::from(fg == p.foreground);
    }
    Ok(right as f64 / patches.len() as f64)
}

// ------------------------------------------------------------------ metrics

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegMetrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SegMetrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if tp == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { tp, fp, fn_, tn, precision, recall, f1 }
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Confusion counts over in-mask pixels. Values above 0 are foreground, so
/// both `{0, 1}` and `{-1, 1}` maps work; mask values above 0.5 are inside.
pub fn f1(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<SegMetrics> {
    check_same("f1", pred, gt)?;
    if let Some(m) = mask {
        check_same("f1", pred, m)?;
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for i in 0..pred.numel() {
        if mask.is_some_and(|m| m.data()[i] <= 0.5) {
            continue;
        }
        match (pred.data()[i] > 0.0, gt.data()[i] > 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(SegMetrics::from_counts(tp, fp, fn_, tn))
}

/// Error map: TP black, FP green, FN red, TN and out-of-mask white.
pub fn overlay(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<RgbImage> {
    check_same("overlay", pred, gt)?;
    if let Some(m) = mask {
        check_same("overlay", pred, m)?;
    }
    let (_, h, w) = pred.chw()?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let inside = mask.is_none_or(|m| m.data()[i] > 0.5);
        *px = Rgb(match (inside, pred.data()[i] > 0.0, gt.data()[i] > 0.0) {
            (false, _, _) => FIG_TN,
            (true, true, true) => FIG_TP,
            (true, true, false) => FIG_FP,
            (true, false, true) => FIG_FN,
            (true, false, false) => FIG_TN,
        });
    }
    Ok(img)
}

// ------------------------------------------------------------------ widths

/// Exact squared Euclidean distance from each pixel to the nearest pixel
/// where `seed` is true (infinite if there is none).
pub fn squared_distance_transform(seed: &[bool], h: usize, w: usize) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut f: Vec<f64> = seed.iter().map(|&s| if s { 0.0 } else { INF }).collect();
    let mut line = Vec::new();
    for x in 0..w {
        line.clear();
        line.extend((0..h).map(|y| f[y * w + x]));
        let d = edt_1d(&line);
        for y in 0..h {
            f[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        let d = edt_1d(&f[y * w..(y + 1) * w]);
        f[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    f.into_iter().map(|v| if v >= INF { f64::INFINITY } else { v }).collect()
}

fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *out = (q as f64 - p as f64).powi(2) + f[p];
    }
    d
}

/// Local filament width at each foreground pixel: the diameter `2r - 1` of
/// the largest disc that fits inside the foreground and covers the pixel,
/// where `r` is the distance from the disc center to the background.
/// Background pixels get 0.
pub fn local_width(foreground: &[bool], h: usize, w: usize) -> Vec<f64> {
    let bg: Vec<bool> = foreground.iter().map(|&f| !f).collect();
    let dt: Vec<f64> = squared_distance_transform(&bg, h, w).into_iter().map(f64::sqrt).collect();
    let mut width = vec![0.0f64; h * w];
    for cy in 0..h {
        for cx in 0..w {
            let r = dt[cy * w + cx];
            if !foreground[cy * w + cx] || !r.is_finite() {
                continue;
            }
            let d = 2.0 * r - 1.0;
            let reach = r.ceil() as isize;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (y, x) = (cy as isize + dy, cx as isize + dx);
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    let i = y as usize * w + x as usize;
                    if foreground[i] && ((dy * dy + dx * dx) as f64) < r * r && width[i] < d {
                        width[i] = d;
                    }
                }
            }
        }
    }
    width
}

// ------------------------------------------------------------------ schemes

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScore {
    pub id: String,
    pub metrics: SegMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub patches: usize,
    pub average_f1: f64,
    pub per_image: Vec<ImageScore>,
}

/// Four-scenario segmentation-utility table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scheme1Report {
    pub averaging: &'static str,
    pub rows: Vec<ScenarioResult>,
}

pub const SCENARIOS: [&str; 4] = ["synthetic", "real", "real+synthetic", "2x real"];
const AVERAGING: &str = "mean of per-image F1 over in-mask pixels";

fn evaluate(seg: &Segmenter, test: &[ImagePair]) -> Result<(f64, Vec<ImageScore>)> {
    let mut scores = Vec::with_capacity(test.len());
    for pair in test {
        let s = seg.segment(&pair.image)?;
        scores
            .push(ImageScore { id: pair.id.clone(), metrics: f1(&s.binary, &pair.segmentation, pair.mask.as_ref())? });
    }
    let avg = scores.iter().map(|s| s.metrics.f1).sum::<f64>() / scores.len().max(1) as f64;
    Ok((avg, scores))
}

/// Train one segmenter per scenario and score each on `test`.
///
/// Patch sets: A and B are two independent draws from the real images, S is
/// a draw from the synthetic images using B's stream. Scenarios use S, A,
/// A+S and A+B with one shared training seed, so replacing the synthetic set
/// by a copy of the real set makes the last two rows identical.
pub fn scheme1(
    real: &[ImagePair],
    synthetic: &[ImagePair],
    test: &[ImagePair],
    config: &SegmenterConfig,
) -> Result<Scheme1Report> {
    config.validate()?;
    if real.is_empty() || synthetic.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (_, h, w) = real[0].image.chw()?;
    let budget = config.budget(h, w);
    if budget < 2 * real.len() {
        return Err(Error::InvalidArgument(format!(
            "patch budget {budget} is too small to split over {} real images twice",
            real.len()
        )));
    }
    let a = sample_patches(real, budget, config, &mut SeedStream::new(config.seed, 0))?;
    let b = sample_patches(real, budget, config, &mut SeedStream::new(config.seed, 1))?;
    let s = sample_patches(synthetic, budget, config, &mut SeedStream::new(config.seed, 1))?;
    let sets: [Vec<Patch>; 4] = [s.clone(), a.clone(), [a.clone(), s].concat(), [a, b].concat()];
    let mut rows = Vec::new();
    for (name, set) in SCENARIOS.iter().zip(sets) {
        let seg = train_on_patches(&set, config, config.seed)?;
        let (average_f1, per_image) = evaluate(&seg, test)?;
        rows.push(ScenarioResult { scenario: name.to_string(), patches: set.len(), average_f1, per_image });
    }
    Ok(Scheme1Report { averaging: AVERAGING, rows })
}

impl Scheme1Report {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# average F1: {}", self.averaging);
        let _ = writeln!(s, "{:<16} {:>8} {:>10}", "training set", "patches", "F1 (%)");
        for r in &self.rows {
            let _ = writeln!(s, "{:<16} {:>8} {:>10.2}", r.scenario, r.patches, 100.0 * r.average_f1);
        }
        let f = |n: &str| self.rows.iter().find(|r| r.scenario == n).map(|r| r.average_f1);
        if let (Some(syn), Some(real)) = (f("synthetic"), f("real")) {
            let verdict = if syn < real { "holds" } else { "does not hold" };
            let _ = writeln!(s, "# note: synthetic-only below real-only {verdict} in this run");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedScore {
    pub id: String,
    pub real: SegMetrics,
    pub phantom: SegMetrics,
    /// In-mask pixels where the two predictions differ.
    pub disagreements: u64,
}

/// One segmenter applied to real images and to their phantoms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scheme2Report {
    pub averaging: &'static str,
    pub average_f1_real: f64,
    pub average_f1_phantom: f64,
    pub per_image: Vec<PairedScore>,
    /// Mean local width of ground-truth filaments over all foreground pixels.
    pub mean_width_all: f64,
    /// Mean local width over foreground pixels where the predictions differ.
    pub mean_width_disagreement: Option<f64>,
}

pub struct Scheme2Output {
    pub report: Scheme2Report,
    /// Per image: real and phantom prediction maps.
    pub predictions: Vec<(Tensor, Tensor)>,
}

pub fn scheme2(seg: &Segmenter, real: &[ImagePair], phantoms: &[ImagePair]) -> Result<Scheme2Output> {
    if real.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if real.len() != phantoms.len() {
        return Err(Error::InvalidArgument(format!("{} real images but {} phantoms", real.len(), phantoms.len())));
    }
    let mut per_image = Vec::new();
    let mut predictions = Vec::new();
    let (mut w_all, mut n_all, mut w_dis, mut n_dis) = (0.0, 0u64, 0.0, 0u64);
    for (r, p) in real.iter().zip(phantoms) {
        if r.segmentation != p.segmentation {
            return Err(Error::InvalidArgument(format!("{} and {} have different ground truth", r.id, p.id)));
        }
        let sr = seg.segment(&r.image)?;
        let sp = seg.segment(&p.image)?;
        let (_, h, w) = r.segmentation.chw()?;
        let fg = r.foreground();
        let width = local_width(&fg, h, w);
        let mut disagreements = 0;
        for i in 0..h * w {
            if r.mask.as_ref().is_some_and(|m| m.data()[i] <= 0.5) {
                continue;
            }
            let differ = sr.binary.data()[i] != sp.binary.data()[i];
            disagreements += u64::from(differ);
            if fg[i] {
                w_all += width[i];
                n_all += 1;
                if differ {
                    w_dis += width[i];
                    n_dis += 1;
                }
            }
        }
        per_image.push(PairedScore {
            id: r.id.clone(),
            real: f1(&sr.binary, &r.segmentation, r.mask.as_ref())?,
            phantom: f1(&sp.binary, &p.segmentation, p.mask.as_ref())?,
            disagreements,
        });
        predictions.push((sr.binary, sp.binary));
    }
    let n = per_image.len() as f64;
    let report = Scheme2Report {
        averaging: AVERAGING,
        average_f1_real: per_image.iter().map(|s| s.real.f1).sum::<f64>() / n,
        average_f1_phantom: per_image.iter().map(|s| s.phantom.f1).sum::<f64>() / n,
        per_image,
        mean_width_all: if n_all == 0 { 0.0 } else { w_all / n_all as f64 },
        mean_width_disagreement: (n_dis > 0).then(|| w_dis / n_dis as f64),
    };
    Ok(Scheme2Output { report, predictions })
}

impl Scheme2Report {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# average F1: {}", self.averaging);
        let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>8}", "image", "real (%)", "phantom (%)", "differ");
        for r in &self.per_image {
            let _ = writeln!(
                s,
                "{:<24} {:>10.2} {:>10.2} {:>8}",
                r.id,
                100.0 * r.real.f1,
                100.0 * r.phantom.f1,
                r.disagreements
            );
        }
        let _ = writeln!(
            s,
            "{:<24} {:>10.2} {:>10.2}",
            "average",
            100.0 * self.average_f1_real,
            100.0 * self.average_f1_phantom
        );
        let _ = writeln!(s, "# mean filament width: all {:.3}", self.mean_width_all);
        if let Some(d) = self.mean_width_disagreement {
            let _ = writeln!(s, "# mean filament width: where predictions differ {d:.3}");
        }
        s
    }
}
