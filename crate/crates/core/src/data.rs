//! Image/ground-truth ingestion, per-dataset preprocessing and its inverse.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dataset families with distinct preprocessing rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Center-crop to the short-side square, then bicubic resize.
    DriveLike,
    /// Direct bicubic resize.
    StareLike,
    /// Direct bicubic resize to a larger target.
    HrfLike,
    /// Direct bicubic resize.
    NeuronLike,
    /// Direct bicubic resize; mask derived from luminance when absent.
    Generic,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "drive-like" => DatasetKind::DriveLike,
            "stare-like" => DatasetKind::StareLike,
            "hrf-like" => DatasetKind::HrfLike,
            "neuron-like" => DatasetKind::NeuronLike,
            "generic" => DatasetKind::Generic,
            _ => return Err(Error::Config(format!("unknown dataset kind {s:?}"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::DriveLike => "drive-like",
            DatasetKind::StareLike => "stare-like",
            DatasetKind::HrfLike => "hrf-like",
            DatasetKind::NeuronLike => "neuron-like",
            DatasetKind::Generic => "generic",
        }
    }

    /// Training resolution used at full scale.
    pub fn full_target(self) -> usize {
        match self {
            DatasetKind::HrfLike => 2048,
            _ => 512,
        }
    }
}

/// Where the preprocessed image came from inside the raw frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceGeometry {
    /// Raw `(height, width)`.
    pub original: (usize, usize),
    /// `(top, left, side)` of the square crop, if one was taken.
    pub crop: Option<(usize, usize, usize)>,
}

impl SourceGeometry {
    pub fn uncropped(h: usize, w: usize) -> Self {
        Self { original: (h, w), crop: None }
    }
}

/// One preprocessed training example.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    /// `[3, S, S]` in `[-1, 1]`.
    pub image: Tensor,
    /// `[1, S, S]` with values in `{-1, 1}`.
    pub segmentation: Tensor,
    /// `[1, S, S]` with values in `{0, 1}`.
    pub mask: Option<Tensor>,
    pub geometry: SourceGeometry,
}

impl ImagePair {
    pub fn size(&self) -> usize {
        self.image.shape()[1]
    }

    /// Foreground map in `{0, 1}`.
    pub fn foreground(&self) -> Vec<bool> {
        self.segmentation.data().iter().map(|&v| v > 0.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessOptions {
    pub kind: DatasetKind,
    pub target_size: usize,
    /// Square crop side for drive-like data; defaults to the short side.
    pub crop_size: Option<usize>,
}

impl PreprocessOptions {
    pub fn new(kind: DatasetKind, target_size: usize) -> Self {
        Self { kind, target_size, crop_size: None }
    }
}

// ------------------------------------------------------------ conversions

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p.0[c] as f32;
        }
    }
    Tensor::new(vec![3, h, w], data).unwrap()
}

pub fn gray_to_tensor(img: &GrayImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(vec![1, h, w], img.as_raw().iter().map(|&v| v as f32).collect()).unwrap()
}

/// Map `[-1, 1]` to `[0, 255]`, rounding half up.
pub fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// `[3, H, W]` tensor in `[-1, 1]` to an 8-bit RGB image.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::shape("tensor_to_rgb", format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    }))
}

/// Binary `[1, H, W]` map (foreground where value > 0) to a 0/255 image.
pub fn binary_to_gray(t: &Tensor) -> Result<GrayImage> {
    let (_, h, w) = t.chw()?;
    let d = t.data();
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if d[y as usize * w + x as usize] > 0.0 { 255 } else { 0 }])
    }))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path).map(|i| i.to_rgb8()).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    image::open(path).map(|i| i.to_luma8()).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

// ------------------------------------------------------------ resampling

fn catmull_rom(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Four (index, weight) taps per output sample, half-pixel aligned and
/// edge-clamped.
fn cubic_taps(in_len: usize, out_len: usize) -> Vec<[(usize, f64); 4]> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let mut taps = [(0usize, 0.0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let pos = base + k as f64 - 1.0;
                let idx = pos.clamp(0.0, (in_len - 1) as f64) as usize;
                *tap = (idx, catmull_rom(src - pos));
            }
            taps
        })
        .collect()
}

/// Separable bicubic (Catmull-Rom, `a = −0.5`) resize of a `[C, H, W]` tensor.
pub fn bicubic_resize(img: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {new_h}x{new_w} must be positive")));
    }
    if (h, w) == (new_h, new_w) {
        return Ok(img.clone());
    }
    let tx = cubic_taps(w, new_w);
    let ty = cubic_taps(h, new_h);
    let src = img.data();
    let mut tmp = vec![0.0f64; c * h * new_w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (x, taps) in tx.iter().enumerate() {
                tmp[(ch * h + y) * new_w + x] = taps.iter().map(|&(i, wt)| row[i] as f64 * wt).sum();
            }
        }
    }
    let mut out = vec![0.0f32; c * new_h * new_w];
    for ch in 0..c {
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..new_w {
                let v: f64 = taps.iter().map(|&(i, wt)| tmp[(ch * h + i) * new_w + x] * wt).sum();
                out[(ch * new_h + y) * new_w + x] = v as f32;
            }
        }
    }
    Tensor::new(vec![c, new_h, new_w], out)
}

/// Nearest-neighbour resize with half-pixel alignment.
pub fn nearest_resize(img: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {new_h}x{new_w} must be positive")));
    }
    let map =
        |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let src = img.data();
    let mut out = vec![0.0f32; c * new_h * new_w];
    for ch in 0..c {
        for y in 0..new_h {
            let sy = map(y, h, new_h);
            for x in 0..new_w {
                out[(ch * new_h + y) * new_w + x] = src[(ch * h + sy) * w + map(x, w, new_w)];
            }
        }
    }
    Tensor::new(vec![c, new_h, new_w], out)
}

fn crop(img: &Tensor, top: usize, left: usize, ch_h: usize, ch_w: usize) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    if top + ch_h > h || left + ch_w > w {
        return Err(Error::InvalidArgument(format!("crop {ch_h}x{ch_w} at ({top},{left}) exceeds {h}x{w}")));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(c * ch_h * ch_w);
    for ch in 0..c {
        for y in top..top + ch_h {
            out.extend_from_slice(&src[(ch * h + y) * w + left..(ch * h + y) * w + left + ch_w]);
        }
    }
    Tensor::new(vec![c, ch_h, ch_w], out)
}

// ------------------------------------------------------------ masks

/// Set pixels outside the mask (value < 0.5) to the background value −1.
pub fn apply_mask(img: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    if mask.shape() != [1, h, w] {
        return Err(Error::shape("apply_mask", format!("mask {:?} for image {:?}", mask.shape(), img.shape())));
    }
    let m = mask.data();
    let mut out = img.clone();
    let plane = h * w;
    for ch in 0..c {
        for (i, v) in out.data_mut()[ch * plane..(ch + 1) * plane].iter_mut().enumerate() {
            if m[i] < 0.5 {
                *v = -1.0;
            }
        }
    }
    Ok(out)
}

/// Field-of-view mask: luminance above 10/255, largest 4-connected component,
/// interior holes filled.
pub fn derive_mask(img: &RgbImage) -> GrayImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let on: Vec<bool> = img
        .pixels()
        .map(|p| {
            let lum = 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64;
            lum > 10.0
        })
        .collect();
    let labels = components(&on, w, h);
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels.iter().flatten() {
        *sizes.entry(*l).or_default() += 1;
    }
    let best = sizes.iter().max_by_key(|&(l, n)| (*n, std::cmp::Reverse(*l))).map(|(l, _)| *l);
    let keep: Vec<bool> = labels.iter().map(|l| l.is_some() && *l == best).collect();
    // Holes are background regions that do not touch the border.
    let off: Vec<bool> = keep.iter().map(|k| !k).collect();
    let bg = components(&off, w, h);
    let mut border = std::collections::BTreeSet::new();
    for x in 0..w {
        border.insert(bg[x]);
        border.insert(bg[(h - 1) * w + x]);
    }
    for y in 0..h {
        border.insert(bg[y * w]);
        border.insert(bg[y * w + w - 1]);
    }
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let inside = keep[i] || (bg[i].is_some() && !border.contains(&bg[i]));
        Luma([if inside { 255 } else { 0 }])
    })
}

fn components(on: &[bool], w: usize, h: usize) -> Vec<Option<usize>> {
    let mut labels = vec![None; on.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..on.len() {
        if !on[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(next);
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if on[j] && labels[j].is_none() {
                    labels[j] = Some(next);
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        next += 1;
    }
    labels
}

// ------------------------------------------------------------ pipeline

fn binarize(t: &Tensor, threshold: f32, lo: f32, hi: f32) -> Tensor {
    t.map(|v| if v >= threshold { hi } else { lo })
}

/// Crop/resize a raw image, ground truth and optional mask into an [`ImagePair`].
pub fn preprocess(
    id: &str,
    raw_image: &RgbImage,
    raw_gt: &GrayImage,
    raw_mask: Option<&GrayImage>,
    opts: &PreprocessOptions,
) -> Result<ImagePair> {
    let (h, w) = (raw_image.height() as usize, raw_image.width() as usize);
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("{id}: empty image")));
    }
    if (raw_gt.height() as usize, raw_gt.width() as usize) != (h, w) {
        return Err(Error::InvalidArgument(format!(
            "{id}: ground truth is {}x{}, image is {h}x{w}",
            raw_gt.height(),
            raw_gt.width()
        )));
    }
    if let Some(m) = raw_mask {
        if (m.height() as usize, m.width() as usize) != (h, w) {
            return Err(Error::InvalidArgument(format!("{id}: mask size differs from image")));
        }
    }
    if opts.target_size == 0 {
        return Err(Error::InvalidArgument("target size must be positive".into()));
    }
    let derived;
    let raw_mask = match (raw_mask, opts.kind) {
        (None, DatasetKind::Generic) => {
            derived = derive_mask(raw_image);
            Some(&derived)
        }
        (m, _) => m,
    };

    let mut img = rgb_to_tensor(raw_image);
    let mut gt = gray_to_tensor(raw_gt);
    let mut mask = raw_mask.map(gray_to_tensor);
    let mut geometry = SourceGeometry::uncropped(h, w);

    if opts.kind == DatasetKind::DriveLike {
        let side = opts.crop_size.unwrap_or(h.min(w));
        if side > h || side > w || side == 0 {
            return Err(Error::InvalidArgument(format!(
                "{id}: {h}x{w} image is smaller than the {side}x{side} crop window"
            )));
        }
        let (top, left) = ((h - side) / 2, (w - side) / 2);
        img = crop(&img, top, left, side, side)?;
        gt = crop(&gt, top, left, side, side)?;
        mask = mask.map(|m| crop(&m, top, left, side, side)).transpose()?;
        geometry.crop = Some((top, left, side));
    }

    let s = opts.target_size;
    let img = bicubic_resize(&img, s, s)?.map(|v| (v.clamp(0.0, 255.0) / 127.5) - 1.0);
    let gt = binarize(&nearest_resize(&binarize(&gt, 127.5, 0.0, 1.0), s, s)?, 0.5, -1.0, 1.0);
    let mask = mask
        .map(|m| nearest_resize(&binarize(&m, 127.5, 0.0, 1.0), s, s).map(|r| binarize(&r, 0.5, 0.0, 1.0)))
        .transpose()?;
    let image = match &mask {
        Some(m) => apply_mask(&img, m)?,
        None => img,
    };
    Ok(ImagePair { id: id.to_string(), image, segmentation: gt, mask, geometry })
}

/// Resize a phantom back to its raw frame, map to 8-bit and blank everything
/// outside `mask` (any resolution; nearest-resized to the raw frame).
pub fn postprocess(phantom: &Tensor, geometry: &SourceGeometry, mask: Option<&Tensor>) -> Result<RgbImage> {
    let (c, _, _) = phantom.chw()?;
    if c != 3 {
        return Err(Error::shape("postprocess", format!("expected 3 channels, got {c}")));
    }
    let (oh, ow) = geometry.original;
    let full = match geometry.crop {
        None => bicubic_resize(phantom, oh, ow)?,
        Some((top, left, side)) => {
            let inner = bicubic_resize(phantom, side, side)?;
            let mut canvas = Tensor::full(&[3, oh, ow], -1.0);
            let d = canvas.data_mut();
            for ch in 0..3 {
                for y in 0..side {
                    let src = &inner.data()[(ch * side + y) * side..(ch * side + y + 1) * side];
                    let o = (ch * oh + top + y) * ow + left;
                    d[o..o + side].copy_from_slice(src);
                }
            }
            canvas
        }
    };
    let mut img = tensor_to_rgb(&full)?;
    if let Some(m) = mask {
        let m = nearest_resize(m, oh, ow)?;
        for (i, p) in img.pixels_mut().enumerate() {
            if m.data()[i] < 0.5 {
                *p = Rgb([0, 0, 0]);
            }
        }
    }
    Ok(img)
}

/// Peak signal-to-noise ratio between two equally sized 8-bit images, in dB.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions());
    let n = a.as_raw().len() as f64;
    let mse = a.as_raw().iter().zip(b.as_raw()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

// ------------------------------------------------------------ directories

/// A dataset directory: `root/images/*.png`, `root/gt/*.png`, optional
/// `root/masks/*.png`, paired by file stem.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub options: PreprocessOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawEntry {
    pub id: String,
    pub image: PathBuf,
    pub gt: PathBuf,
    pub mask: Option<PathBuf>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for e in entries {
        let p = e.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        if p.extension().and_then(|s| s.to_str()).is_some_and(|s| s.eq_ignore_ascii_case("png")) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), p.clone());
            }
        }
    }
    Ok(out)
}

impl DatasetSpec {
    /// Pair files by stem; every image must have exactly one ground truth.
    pub fn entries(&self) -> Result<Vec<RawEntry>> {
        if !self.root.is_dir() {
            return Err(Error::InvalidArgument(format!("dataset directory {} not found", self.root.display())));
        }
        let images = png_stems(&self.root.join("images"))?;
        let gts = png_stems(&self.root.join("gt"))?;
        let masks = png_stems(&self.root.join("masks"))?;
        let missing: Vec<&str> = images.keys().filter(|k| !gts.contains_key(*k)).map(String::as_str).collect();
        if !missing.is_empty() {
            return Err(Error::InvalidArgument(format!("images without ground truth: {}", missing.join(", "))));
        }
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(images
            .into_iter()
            .map(|(id, image)| RawEntry { gt: gts[&id].clone(), mask: masks.get(&id).cloned(), id, image })
            .collect())
    }

    pub fn load(&self) -> Result<Vec<ImagePair>> {
        self.entries()?
            .iter()
            .map(|e| {
                let img = load_rgb(&e.image)?;
                let gt = load_gray(&e.gt)?;
                let mask = e.mask.as_deref().map(load_gray).transpose()?;
                preprocess(&e.id, &img, &gt, mask.as_ref(), &self.options)
            })
            .collect()
    }
}
