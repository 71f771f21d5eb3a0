//! Procedural fundus-like image/ground-truth pairs for desk-scale runs.
//!
//! Each sample is a circular field of view with a few meandering, branching
//! filaments. The ground truth marks the filaments; the image renders them
//! darker than a smoothly shaded, lightly textured background.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::data::{preprocess, save_gray, save_rgb, DatasetKind, ImagePair, PreprocessOptions};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Raw 8-bit rendering of one sample.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub id: String,
    pub image: RgbImage,
    pub gt: GrayImage,
    pub mask: GrayImage,
}

struct Stroke {
    points: Vec<(f64, f64)>,
    radius: f64,
}

fn walk(rng: &mut SeedStream, start: (f64, f64), heading: f64, len: usize, radius: f64, size: f64) -> Stroke {
    let (mut x, mut y) = start;
    let mut a = heading;
    let mut curl = 0.0;
    let mut points = Vec::with_capacity(len);
    for _ in 0..len {
        points.push((x, y));
        curl = 0.8 * curl + 0.06 * rng.normal();
        a += curl;
        x += 0.5 * a.cos();
        y += 0.5 * a.sin();
        if x < 0.0 || y < 0.0 || x >= size || y >= size {
            break;
        }
    }
    Stroke { points, radius }
}

/// Render `n` raw samples of `size`×`size` pixels.
pub fn render_raw(n: usize, size: usize, seed: u64) -> Vec<RawSample> {
    (0..n).map(|i| render_one(&format!("micro-{i:03}"), size, seed, i as u64)).collect()
}

fn render_one(id: &str, size: usize, seed: u64, index: u64) -> RawSample {
    let mut rng = SeedStream::new(seed, 1000 + index);
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let fov = 0.47 * s;

    // Filament skeletons: trunks from near the disc with a branch each.
    let disc = (c + (rng.uniform() - 0.5) * 0.3 * s, c + (rng.uniform() - 0.5) * 0.3 * s);
    let trunks = 3 + rng.below(3);
    let mut strokes = Vec::new();
    for t in 0..trunks {
        let heading = (t as f64 + rng.uniform() * 0.6) * std::f64::consts::TAU / trunks as f64;
        let len = (s * (0.9 + 0.6 * rng.uniform())) as usize;
        let radius = 0.9 + 0.7 * rng.uniform();
        let trunk = walk(&mut rng, disc, heading, len, radius, s);
        if trunk.points.len() > 8 {
            let at = trunk.points[trunk.points.len() / 3 + rng.below(trunk.points.len() / 3)];
            let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let br = 0.55 + 0.3 * rng.uniform();
            let branch = walk(&mut rng, at, heading + side * 0.8, len / 2, br, s);
            strokes.push(branch);
        }
        strokes.push(trunk);
    }

    let mut gt = vec![false; size * size];
    let mut depth = vec![0.0f64; size * size];
    for stroke in &strokes {
        let r = stroke.radius;
        let reach = r.ceil() as isize + 1;
        for &(px, py) in &stroke.points {
            let (cx, cy) = (px.round() as isize, py.round() as isize);
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (x, y) = (cx + dx, cy + dy);
                    if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
                        continue;
                    }
                    let d = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
                    let i = y as usize * size + x as usize;
                    if d <= r.max(0.5) {
                        gt[i] = true;
                    }
                    // Soft vessel profile extending half a pixel past the label.
                    let v = (1.0 - (d / (r + 0.5)).powi(2)).max(0.0) * (0.6 + 0.25 * r);
                    depth[i] = depth[i].max(v);
                }
            }
        }
    }

    // Low-frequency shading.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let ang = rng.uniform() * std::f64::consts::TAU;
            let freq = (1.0 + 2.0 * rng.uniform()) * std::f64::consts::TAU / s;
            (freq * ang.cos(), freq * ang.sin(), rng.uniform() * std::f64::consts::TAU, 0.04 + 0.04 * rng.uniform())
        })
        .collect();
    let tint = [0.85 + 0.1 * rng.uniform(), 0.38 + 0.08 * rng.uniform(), 0.16 + 0.06 * rng.uniform()];

    let mut inside = vec![false; size * size];
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let r = (dx * dx + dy * dy).sqrt();
            if r > fov {
                gt[i] = false;
                continue;
            }
            inside[i] = true;
            let vignette = 1.0 - 0.35 * (r / fov).powi(2);
            let dd = ((x as f64 - disc.0).powi(2) + (y as f64 - disc.1).powi(2)) / (0.08 * s).powi(2);
            let bright = 0.25 * (-dd).exp();
            let shade: f64 =
                waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            let base = (vignette + bright + shade) * (1.0 - 0.55 * depth[i]);
            let px = [0, 1, 2].map(|k| (255.0 * (base * tint[k]).clamp(0.0, 1.0)).round() as u8);
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }

    let to_gray = |v: &[bool]| {
        GrayImage::from_fn(size as u32, size as u32, |x, y| {
            Luma([if v[y as usize * size + x as usize] { 255 } else { 0 }])
        })
    };
    RawSample { id: id.to_string(), image: img, gt: to_gray(&gt), mask: to_gray(&inside) }
}

/// `n` preprocessed pairs of `size`×`size` pixels, deterministic per seed.
pub fn generate_synthetic_micro_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<ImagePair>> {
    let opts = PreprocessOptions::new(DatasetKind::Generic, size);
    render_raw(n, size, seed).iter().map(|r| preprocess(&r.id, &r.image, &r.gt, Some(&r.mask), &opts)).collect()
}

/// Write samples in the `images/`, `gt/`, `masks/` directory layout.
pub fn write_raw_dataset(root: &Path, samples: &[RawSample]) -> Result<()> {
    for sub in ["images", "gt", "masks"] {
        std::fs::create_dir_all(root.join(sub))
            .map_err(|e| Error::io(format!("creating {}", root.join(sub).display()), e))?;
    }
    for s in samples {
        save_rgb(&s.image, &root.join("images").join(format!("{}.png", s.id)))?;
        save_gray(&s.gt, &root.join("gt").join(format!("{}.png", s.id)))?;
        save_gray(&s.mask, &root.join("masks").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}
