//! Shared oracles, gradient checker and audits for the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use fila_core::evaluation::{f1, SegMetrics};
use fila_core::losses::{self, L1Norm, LossWeights};
use fila_core::nets::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use fila_core::perceptual::FeatureStack;
use fila_core::rng::SeedStream;
use fila_core::tape::{gram_matrix, BatchNormConfig, Mode, RunningStats, Tape, Var};
use fila_core::{Result, Tensor};

// ------------------------------------------------------------ random inputs

pub fn normal(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = SeedStream::new(seed, 77);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| (rng.normal() * scale) as f32).collect()).unwrap()
}

pub fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = SeedStream::new(seed, 78);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| (lo + (hi - lo) * rng.uniform()) as f32).collect()).unwrap()
}

/// Values with magnitude in `[0.2, 1.2]` and random sign, clear of kinks at 0.
pub fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeedStream::new(seed, 79);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = 0.2 + rng.uniform();
            (if rng.uniform() < 0.5 { -m } else { m }) as f32
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ---------------------------------------------------------- gradient check

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    GradCase { name, inputs, build: Box::new(build) }
}

pub const FD_STEP: f64 = 1e-2;
pub const FD_FLOOR: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;
const MAX_COORDS: usize = 48;

/// Projection `Σ r ⊙ f(inputs)` evaluated in f64 from the f32 outputs.
fn projected(case: &GradCase, inputs: &[Tensor], probe: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars).expect("forward");
    tape.value(out).data().iter().zip(probe.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Largest relative error between the tape gradient and a Richardson-
/// extrapolated central difference over (a sample of) every input coordinate.
///
/// Per input: `max |g − ĝ| / max(max |g|, max |ĝ|, FD_FLOOR)` over the
/// checked coordinates; the case's error is the maximum over inputs.
pub fn check_gradient(case: &GradCase) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars).expect("forward");
    let probe = normal(tape.shape(out), 4242, 1.0);
    let pv = tape.constant(probe.clone());
    let prod = tape.mul(out, pv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (k, input) in case.inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let n = input.numel();
        let coords: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            let mut rng = SeedStream::new(k as u64, 5);
            (0..MAX_COORDS).map(|_| rng.below(n)).collect()
        };
        let (mut diff, mut scale) = (0.0f64, FD_FLOOR);
        for &i in &coords {
            let central = |step: f64| {
                let mut plus = case.inputs.to_vec();
                plus[k].data_mut()[i] += step as f32;
                let mut minus = case.inputs.to_vec();
                minus[k].data_mut()[i] -= step as f32;
                let h = plus[k].data()[i] as f64 - minus[k].data()[i] as f64;
                (projected(case, &plus, &probe) - projected(case, &minus, &probe)) / h
            };
            let numeric = (4.0 * central(FD_STEP / 2.0) - central(FD_STEP)) / 3.0;
            let a = analytic.data()[i] as f64;
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        worst = worst.max(diff / scale);
    }
    worst
}

fn features(ids: &[(usize, usize)], vars: &[Var]) -> FeatureStack {
    FeatureStack { maps: ids.iter().copied().zip(vars.iter().copied()).collect() }
}

fn small_weights() -> LossWeights {
    LossWeights { block_weights: BTreeMap::from([(1, 0.2), (2, 0.2)]), ..LossWeights::default() }
}

/// Every differentiable op and every loss, on small random inputs.
pub fn gradient_cases() -> Vec<GradCase> {
    let bn = BatchNormConfig::default();
    vec![
        case(
            "conv2d stride2 pad1",
            vec![normal(&[2, 6, 6], 1, 0.5), normal(&[3, 2, 4, 4], 2, 0.3), normal(&[3], 3, 0.1)],
            |t, v| t.conv2d(v[0], v[1], v[2], 2, 1),
        ),
        case(
            "conv2d stride1 pad0",
            vec![normal(&[2, 5, 5], 4, 0.5), normal(&[2, 2, 3, 3], 5, 0.3), normal(&[2], 6, 0.1)],
            |t, v| t.conv2d(v[0], v[1], v[2], 1, 0),
        ),
        case(
            "conv_transpose2d stride2 pad1",
            vec![normal(&[3, 3, 3], 7, 0.5), normal(&[3, 2, 4, 4], 8, 0.3), normal(&[2], 9, 0.1)],
            |t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 1),
        ),
        case(
            "batch_norm train",
            vec![normal(&[3, 3, 4], 10, 1.0), uniform(&[3], 11, 0.5, 1.5), normal(&[3], 12, 0.2)],
            move |t, v| {
                let mut s = RunningStats::new(3);
                t.batch_norm(v[0], v[1], v[2], &mut s, bn, Mode::Train)
            },
        ),
        case(
            "batch_norm infer",
            vec![normal(&[2, 3, 3], 13, 1.0), uniform(&[2], 14, 0.5, 1.5), normal(&[2], 15, 0.2)],
            move |t, v| {
                let mut s = RunningStats { mean: vec![0.3, -0.2], var: vec![1.5, 0.7] };
                t.batch_norm(v[0], v[1], v[2], &mut s, bn, Mode::Infer)
            },
        ),
        case("leaky_relu", vec![off_zero(&[2, 3, 3], 16)], |t, v| Ok(t.leaky_relu(v[0], 0.2))),
        case("tanh", vec![normal(&[2, 3, 3], 17, 1.0)], |t, v| Ok(t.tanh(v[0]))),
        case("sigmoid", vec![normal(&[2, 3, 3], 18, 1.5)], |t, v| Ok(t.sigmoid(v[0]))),
        case("affine", vec![normal(&[2, 2, 2], 19, 1.0), normal(&[3, 8], 20, 0.5), normal(&[3], 21, 0.1)], |t, v| {
            t.affine(v[0], v[1], v[2])
        }),
        case("concat_channels", vec![normal(&[2, 3, 3], 22, 1.0), normal(&[1, 3, 3], 23, 1.0)], |t, v| {
            t.concat_channels(v[0], v[1])
        }),
        case("reshape", vec![normal(&[12], 24, 1.0)], |t, v| t.reshape(v[0], &[3, 2, 2])),
        case("add", vec![normal(&[2, 3], 25, 1.0), normal(&[2, 3], 26, 1.0)], |t, v| t.add(v[0], v[1])),
        case("sub", vec![normal(&[2, 3], 27, 1.0), normal(&[2, 3], 28, 1.0)], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![normal(&[2, 3], 29, 1.0), normal(&[2, 3], 30, 1.0)], |t, v| t.mul(v[0], v[1])),
        case("scale_shift", vec![normal(&[5], 31, 1.0)], |t, v| Ok(t.scale_shift(v[0], -1.5, 0.25))),
        case("scale", vec![normal(&[5], 32, 1.0)], |t, v| Ok(t.scale(v[0], 3.0))),
        case("abs", vec![off_zero(&[2, 4], 33)], |t, v| Ok(t.abs(v[0]))),
        case("square", vec![normal(&[2, 4], 34, 1.0)], |t, v| Ok(t.square(v[0]))),
        case("clamped_log", vec![uniform(&[6], 35, 0.1, 0.9)], |t, v| Ok(t.clamped_log(v[0], 1e-8, 1.0 - 1e-8))),
        case("sum", vec![normal(&[2, 3], 36, 1.0)], |t, v| Ok(t.sum(v[0]))),
        case("mean", vec![normal(&[2, 3], 37, 1.0)], |t, v| Ok(t.mean(v[0]))),
        case("gram", vec![normal(&[3, 3, 3], 38, 0.5)], |t, v| t.gram(v[0])),
        case("avg_pool2", vec![normal(&[2, 4, 6], 39, 1.0)], |t, v| t.avg_pool2(v[0])),
        case("total_variation", vec![normal(&[3, 4, 5], 40, 0.5)], |t, v| t.total_variation(v[0])),
        // Losses.
        case("dev_loss mean", vec![normal(&[3, 4, 4], 41, 0.5), off_zero(&[3, 4, 4], 42)], |t, v| {
            let xh = t.add(v[0], v[1])?;
            losses::dev_loss(t, v[0], xh, L1Norm::Mean)
        }),
        case("dev_loss sum", vec![normal(&[3, 4, 4], 43, 0.5), off_zero(&[3, 4, 4], 44)], |t, v| {
            let xh = t.sub(v[0], v[1])?;
            losses::dev_loss(t, v[0], xh, L1Norm::Sum)
        }),
        case("generator_gan_loss", vec![uniform(&[1], 45, 0.2, 0.8)], |t, v| Ok(losses::generator_gan_loss(t, v[0]))),
        case("discriminator_loss", vec![uniform(&[1], 46, 0.2, 0.8), uniform(&[1], 47, 0.2, 0.8)], |t, v| {
            Ok(losses::discriminator_loss(t, v[0], v[1]))
        }),
        case(
            "generator_total_loss_gan",
            vec![uniform(&[1], 48, 0.2, 0.8), normal(&[3, 4, 4], 49, 0.5), off_zero(&[3, 4, 4], 50)],
            |t, v| {
                let xh = t.add(v[1], v[2])?;
                Ok(losses::generator_total_loss_gan(t, v[0], v[1], xh, &LossWeights::default())?.total)
            },
        ),
        case(
            "style_loss",
            vec![
                normal(&[3, 4, 4], 51, 0.5),
                normal(&[4, 2, 2], 52, 0.5),
                normal(&[3, 4, 4], 53, 0.5),
                normal(&[4, 2, 2], 54, 0.5),
            ],
            |t, v| {
                let ids = [(1, 1), (2, 1)];
                losses::style_loss(t, &features(&ids, &v[..2]), &features(&ids, &v[2..]), &small_weights())
            },
        ),
        case("content_loss", vec![normal(&[4, 2, 2], 55, 0.5), normal(&[4, 2, 2], 56, 0.5)], |t, v| {
            let ids = [(2, 2)];
            losses::content_loss(t, &features(&ids, &v[..1]), &features(&ids, &v[1..]))
        }),
        case("tv_loss", vec![normal(&[3, 5, 5], 57, 0.5)], |t, v| losses::tv_loss(t, v[0])),
        case(
            "style_transfer_loss",
            vec![
                normal(&[4, 2, 2], 58, 0.5),
                normal(&[3, 4, 4], 59, 0.5),
                normal(&[4, 2, 2], 60, 0.5),
                normal(&[4, 2, 2], 61, 0.5),
                normal(&[3, 4, 4], 62, 0.5),
                normal(&[4, 2, 2], 63, 0.5),
                normal(&[3, 4, 4], 64, 0.02),
            ],
            |t, v| {
                let st = [(1, 1), (2, 1)];
                let ct = [(2, 2)];
                let terms = losses::style_transfer_loss(
                    t,
                    &features(&ct, &v[0..1]),
                    &features(&st, &v[1..3]),
                    &features(&ct, &v[3..4]),
                    &features(&st, &v[4..6]),
                    v[6],
                    &small_weights(),
                )?;
                Ok(terms.total)
            },
        ),
        case(
            "generator_total_loss_style",
            vec![
                uniform(&[1], 65, 0.2, 0.8),
                normal(&[2, 2, 2], 66, 0.5),
                normal(&[2, 2, 2], 67, 0.5),
                normal(&[3, 4, 4], 68, 0.02),
            ],
            |t, v| {
                let ids = [(1, 1)];
                let terms = losses::style_transfer_loss(
                    t,
                    &features(&ids, &v[1..2]),
                    &features(&ids, &v[1..2]),
                    &features(&ids, &v[2..3]),
                    &features(&ids, &v[2..3]),
                    v[3],
                    &small_weights(),
                )?;
                Ok(losses::generator_total_loss_style(t, v[0], terms)?.total)
            },
        ),
    ]
}

/// Run every case; returns `(name, error)` for each.
pub fn run_gradient_suite() -> Vec<(&'static str, f64)> {
    gradient_cases().iter().map(|c| (c.name, check_gradient(c))).collect()
}

// ------------------------------------------------------------------ oracles

/// Gram matrix by the textbook triple loop, accumulating in f32.
pub fn gram_oracle(f: &[f32], c: usize, p: usize) -> Vec<f32> {
    let mut g = vec![0.0f32; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut acc = 0.0f32;
            for k in 0..p {
                acc += f[i * p + k] * f[j * p + k];
            }
            g[i * c + j] = acc;
        }
    }
    g
}

/// Dense `[out, in]` matrix of a zero-padded strided convolution.
pub fn conv_matrix(
    k: &Tensor,
    c_in: usize,
    h: usize,
    w: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize, usize) {
    let (c_out, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let (rows, cols) = (c_out * oh * ow, c_in * h * w);
    let mut m = vec![0.0f64; rows * cols];
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = (o * oh + oy) * ow + ox;
                for ci in 0..c_in {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let col = (ci * h + iy as usize) * w + ix as usize;
                            m[r * cols + col] += k.data()[((o * c_in + ci) * ks + ky) * ks + kx] as f64;
                        }
                    }
                }
            }
        }
    }
    (m, rows, oh, ow)
}

/// Dense `[out, in]` matrix of a transposed convolution, built from its
/// scatter definition: input pixel `(iy, ix)` adds `K[ci, co, ky, kx]` to
/// output pixel `(iy·s − p + ky, ix·s − p + kx)`.
pub fn conv_transpose_matrix(
    k: &Tensor,
    h: usize,
    w: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize, usize) {
    let (c_in, c_out, ks) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let oh = (h - 1) * stride + ks - 2 * pad;
    let ow = (w - 1) * stride + ks - 2 * pad;
    let (rows, cols) = (c_out * oh * ow, c_in * h * w);
    let mut m = vec![0.0f64; rows * cols];
    for ci in 0..c_in {
        for iy in 0..h {
            for ix in 0..w {
                let col = (ci * h + iy) * w + ix;
                for co in 0..c_out {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                continue;
                            }
                            let r = (co * oh + oy as usize) * ow + ox as usize;
                            m[r * cols + col] += k.data()[((ci * c_out + co) * ks + ky) * ks + kx] as f64;
                        }
                    }
                }
            }
        }
    }
    (m, rows, oh, ow)
}

pub fn mat_vec_bias(m: &[f64], rows: usize, x: &[f32], bias: &[f32], per_channel: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            let dot: f64 = (0..cols).map(|c| m[r * cols + c] * x[c] as f64).sum();
            dot + bias[r / per_channel] as f64
        })
        .collect()
}

/// Largest deviation of tape conv / transposed conv from the matrix oracles
/// over `trials` random configurations with spatial size at most 5×5.
pub fn conv_oracle_deviation(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = SeedStream::new(trial, 11);
        let c_in = 1 + rng.below(3);
        let c_out = 1 + rng.below(3);
        let ks = 1 + rng.below(4);
        let stride = 1 + rng.below(2);
        let pad = rng.below(ks.min(2) + 1).min(ks - 1);
        let h = ks.max(2) + rng.below(6 - ks.max(2));
        let w = ks.max(2) + rng.below(6 - ks.max(2));
        let x = normal(&[c_in, h, w], 100 + trial, 1.0);
        let k = normal(&[c_out, c_in, ks, ks], 200 + trial, 1.0);
        let b = normal(&[c_out], 300 + trial, 1.0);

        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, kv, bv, stride, pad).unwrap();
        let (m, rows, oh, ow) = conv_matrix(&k, c_in, h, w, stride, pad);
        let want = mat_vec_bias(&m, rows, x.data(), b.data(), oh * ow);
        for (a, e) in tape.value(y).data().iter().zip(&want) {
            worst = worst.max((*a as f64 - e).abs());
        }

        // Transposed: kernel is [C_in, C_out, k, k].
        let kt = normal(&[c_in, c_out, ks, ks], 400 + trial, 1.0);
        let ht = 1 + rng.below(5);
        let wt = 1 + rng.below(5);
        let xt = normal(&[c_in, ht, wt], 500 + trial, 1.0);
        let pad_t = if (ht - 1) * stride + ks > 2 * pad && (wt - 1) * stride + ks > 2 * pad { pad } else { 0 };
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(xt.clone()), tape.constant(kt.clone()), tape.constant(b.clone()));
        let y = tape.conv_transpose2d(xv, kv, bv, stride, pad_t).unwrap();
        let (m, rows, oh, ow) = conv_transpose_matrix(&kt, ht, wt, stride, pad_t);
        let want = mat_vec_bias(&m, rows, xt.data(), b.data(), oh * ow);
        assert_eq!(tape.value(y).numel(), want.len());
        for (a, e) in tape.value(y).data().iter().zip(&want) {
            worst = worst.max((*a as f64 - e).abs());
        }
    }
    worst
}

/// Exact checks; returns the first failure.
pub fn run_oracle_suite() -> std::result::Result<(), String> {
    for trial in 0..20u64 {
        let mut rng = SeedStream::new(trial, 12);
        let (c, h, w) = (1 + rng.below(6), 1 + rng.below(5), 1 + rng.below(5));
        let f = normal(&[c, h, w], 600 + trial, 1.0);
        let mut tape = Tape::new();
        let v = tape.constant(f.clone());
        let g = tape.gram(v).unwrap();
        if tape.value(g).data() != gram_oracle(f.data(), c, h * w).as_slice() {
            return Err(format!("gram differs from triple loop (trial {trial})"));
        }
        if gram_matrix(f.data(), c, h * w) != gram_oracle(f.data(), c, h * w) {
            return Err("gram_matrix differs from triple loop".into());
        }
    }
    let dev = conv_oracle_deviation(60);
    if dev >= 1e-5 {
        return Err(format!("conv oracle deviation {dev:e}"));
    }
    // TV by enumeration: [[1,2],[3,5]] → (2−1)² + (5−3)² + (3−1)² + (5−2)² = 18.
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 5.0]).unwrap());
    let tv = losses::tv_loss(&mut tape, v).unwrap();
    if tape.value(tv).item() != 18.0 {
        return Err(format!("tv {} != 18", tape.value(tv).item()));
    }
    // Two channels add: second channel constant contributes 0, third is [[0,1],[0,1]] → 2.
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![2, 2, 2], vec![7.0, 7.0, 7.0, 7.0, 0.0, 1.0, 0.0, 1.0]).unwrap());
    let tv = losses::tv_loss(&mut tape, v).unwrap();
    if tape.value(tv).item() != 2.0 {
        return Err(format!("tv {} != 2", tape.value(tv).item()));
    }
    // F1 by enumeration: tp 2, fp 1, fn 1, tn 1 → p = r = 2/3, f1 = 2/3.
    let pred = Tensor::new(vec![1, 1, 5], vec![1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    let gt = Tensor::new(vec![1, 1, 5], vec![1.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
    let m = f1(&pred, &gt, None).unwrap();
    let want = SegMetrics::from_counts(2, 1, 1, 1);
    if m != want || (m.tp, m.fp, m.fn_, m.tn) != (2, 1, 1, 1) || m.f1 != 2.0 * (2.0 / 3.0) * (2.0 / 3.0) / (4.0 / 3.0) {
        return Err(format!("f1 enumeration mismatch: {m:?}"));
    }
    let m = SegMetrics::from_counts(8, 2, 2, 0);
    if (m.precision, m.recall) != (0.8, 0.8) || (m.f1 - 0.8).abs() > 1e-15 {
        return Err(format!("f1 hand example mismatch: {m:?}"));
    }
    Ok(())
}

// -------------------------------------------------------- architecture audit

fn audit_generator(cfg: &GeneratorConfig, run: bool) -> std::result::Result<(), String> {
    let g = Generator::new(cfg.clone()).map_err(|e| e.to_string())?;
    let (layout, bn) = cfg.layout();
    let names: Vec<&str> = layout.iter().map(|(n, _)| n.as_str()).collect();
    if bn.iter().any(|(n, _)| n.starts_with("out")) || names.iter().any(|n| n.starts_with("out/bn")) {
        return Err("generator output layer has batch norm".into());
    }
    let s = cfg.image_size;
    for i in 0..cfg.depth {
        let (_, shape) =
            layout.iter().find(|(n, _)| n == &format!("enc{i}/conv/kernel")).ok_or(format!("missing enc{i}/conv"))?;
        let expected = (cfg.base_filters << i).min(cfg.max_filters);
        if shape[0] != expected || shape[2] != 4 {
            return Err(format!("enc{i}: kernel {shape:?}, expected {expected} filters of 4x4"));
        }
        let has_bn = bn.iter().any(|(n, _)| n == &format!("enc{i}/bn"));
        if !has_bn {
            return Err(format!("enc{i} lacks batch norm"));
        }
    }
    if run {
        let params = g.init_params(1);
        let y = Tensor::new(vec![1, s, s], (0..s * s).map(|i| if i % 7 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
        let z = normal(&[cfg.z_dim], 3, 1.0);
        for mode in [Mode::Train, Mode::Infer] {
            let (out, _) = g.run(&params, &y, &z, mode).map_err(|e| e.to_string())?;
            if out.shape() != [3, s, s] {
                return Err(format!("generator output {:?}", out.shape()));
            }
            let (lo, hi) = out.min_max();
            if lo < -1.0 || hi > 1.0 {
                return Err(format!("generator output range [{lo}, {hi}]"));
            }
        }
    }
    Ok(())
}

fn audit_discriminator(cfg: &DiscriminatorConfig, run: bool) -> std::result::Result<(), String> {
    let d = Discriminator::new(cfg.clone()).map_err(|e| e.to_string())?;
    let (layout, bn) = cfg.layout();
    if bn.iter().any(|(n, _)| n.starts_with("d0/")) {
        return Err("discriminator input layer has batch norm".into());
    }
    let mut size = cfg.image_size;
    for i in 0..cfg.depth {
        let (_, shape) =
            layout.iter().find(|(n, _)| n == &format!("d{i}/conv/kernel")).ok_or(format!("missing d{i}/conv"))?;
        let expected = (cfg.base_filters << i).min(cfg.max_filters);
        let in_c = if i == 0 { 4 } else { (cfg.base_filters << (i - 1)).min(cfg.max_filters) };
        if shape.as_slice() != [expected, in_c, 4, 4] {
            return Err(format!("d{i}: kernel {shape:?}"));
        }
        if i > 0 && !bn.iter().any(|(n, _)| n == &format!("d{i}/bn")) {
            return Err(format!("d{i} lacks batch norm"));
        }
        size /= 2;
    }
    let head = layout.iter().find(|(n, _)| n == "head/fc/weight").ok_or("missing head/fc")?;
    let flat = cfg.filters(cfg.depth - 1) * size * size;
    if head.1 != [1, flat] {
        return Err(format!("head {:?}, expected [1, {flat}]", head.1));
    }
    if run {
        let params = d.init_params(2);
        let s = cfg.image_size;
        let x = uniform(&[3, s, s], 4, -1.0, 1.0);
        let y = Tensor::full(&[1, s, s], -1.0);
        let p = d.infer(&params, &x, &y).map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&p) {
            return Err(format!("discriminator output {p}"));
        }
    }
    Ok(())
}

pub fn architecture_audit() -> std::result::Result<(), String> {
    audit_generator(&GeneratorConfig::desk(), true)?;
    audit_generator(&GeneratorConfig::for_size(32, 8, 512, 16, 3), true)?;
    audit_generator(&GeneratorConfig::full(), false)?;
    audit_discriminator(&DiscriminatorConfig::desk(), true)?;
    audit_discriminator(&DiscriminatorConfig::full(), false)?;
    // Spatial halving and doubling run through the kernels themselves.
    let cfg = GeneratorConfig::desk();
    let g = Generator::new(cfg.clone()).map_err(|e| e.to_string())?;
    let params = g.init_params(5);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let mut x = tape.constant(Tensor::zeros(&[1, 64, 64]));
    for i in 0..cfg.depth {
        let k = bound.var(&format!("enc{i}/conv/kernel")).map_err(|e| e.to_string())?;
        let b = bound.var(&format!("enc{i}/conv/bias")).map_err(|e| e.to_string())?;
        x = tape.conv2d(x, k, b, 2, 1).map_err(|e| e.to_string())?;
        let want = [cfg.encoder_filters(i), 64 >> (i + 1), 64 >> (i + 1)];
        if tape.shape(x) != want {
            return Err(format!("enc{i} output {:?}, expected {want:?}", tape.shape(x)));
        }
    }
    let full = GeneratorConfig::full();
    if full.bottleneck_size() != 8 || full.encoder_filters(full.depth - 1) != 512 || full.z_channels != 256 {
        return Err("full-scale generator bottleneck is not 8x8x512 with a 256-channel noise map".into());
    }
    Ok(())
}
