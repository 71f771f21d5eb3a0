//! Property-based invariants over randomly generated inputs.

use std::collections::BTreeMap;

use fila_core::checkpoint::Container;
use fila_core::data::{bicubic_resize, preprocess, DatasetKind, PreprocessOptions};
use fila_core::evaluation::{f1, overlay, FIG_FN, FIG_FP, FIG_TN, FIG_TP};
use fila_core::losses::{content_loss, discriminator_loss, generator_gan_loss, style_loss, LossWeights};
use fila_core::perceptual::FeatureStack;
use fila_core::rng::SeedStream;
use fila_core::{Tape, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};
use proptest::prelude::*;

fn tensor_from(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = SeedStream::new(seed, 0);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
}

fn binary(h: usize, w: usize, seed: u64, density: f64) -> Tensor {
    let mut rng = SeedStream::new(seed, 1);
    Tensor::new(vec![1, h, w], (0..h * w).map(|_| if rng.uniform() < density { 1.0 } else { -1.0 }).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn f1_swaps_fp_and_fn(h in 1usize..12, w in 1usize..12, s1: u64, s2: u64, d in 0.05f64..0.95) {
        let pred = binary(h, w, s1, d);
        let gt = binary(h, w, s2, 1.0 - d);
        let a = f1(&pred, &gt, None).unwrap();
        let b = f1(&gt, &pred, None).unwrap();
        prop_assert_eq!((a.tp, a.fp, a.fn_, a.tn), (b.tp, b.fn_, b.fp, b.tn));
        prop_assert_eq!(a.precision, b.recall);
        prop_assert_eq!(a.recall, b.precision);
        prop_assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn overlay_histogram_equals_confusion_counts(h in 1usize..16, w in 1usize..16, s1: u64, s2: u64, s3: u64, masked: bool) {
        let pred = binary(h, w, s1, 0.3);
        let gt = binary(h, w, s2, 0.3);
        let mask = masked.then(|| binary(h, w, s3, 0.7));
        let m = f1(&pred, &gt, mask.as_ref()).unwrap();
        let img = overlay(&pred, &gt, mask.as_ref()).unwrap();
        let count = |c: [u8; 3]| img.pixels().filter(|p| p.0 == c).count() as u64;
        prop_assert_eq!(count(FIG_TP), m.tp);
        prop_assert_eq!(count(FIG_FP), m.fp);
        prop_assert_eq!(count(FIG_FN), m.fn_);
        let outside = mask.as_ref().map_or(0, |m| m.data().iter().filter(|&&v| v <= 0.5).count() as u64);
        prop_assert_eq!(count(FIG_TN), m.tn + outside);
    }

    #[test]
    fn container_round_trips(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..5),
        seed: u64,
        value in "[a-z0-9.,:]{0,12}",
    ) {
        let mut c = Container::new();
        c.set("note", &value);
        for (i, s) in shapes.iter().enumerate() {
            c.insert(format!("t{i}"), tensor_from(s.clone(), seed + i as u64));
        }
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.get("note").unwrap(), value.as_str());
        prop_assert_eq!(&back.tensors, &c.tensors);
        prop_assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn resize_keeps_constants_and_shape(c in 1usize..4, h in 1usize..20, w in 1usize..20, nh in 1usize..24, nw in 1usize..24, v in -2.0f32..2.0) {
        let out = bicubic_resize(&Tensor::full(&[c, h, w], v), nh, nw).unwrap();
        prop_assert_eq!(out.shape(), &[c, nh, nw]);
        for &x in out.data() {
            prop_assert!((x - v).abs() < 1e-5);
        }
    }

    #[test]
    fn preprocessed_pairs_satisfy_range_invariants(
        h in 4u32..40, w in 4u32..40, target in 2usize..24, kind in 0usize..5, with_mask: bool, seed: u64,
    ) {
        let kinds = [DatasetKind::DriveLike, DatasetKind::StareLike, DatasetKind::HrfLike, DatasetKind::NeuronLike, DatasetKind::Generic];
        let mut rng = SeedStream::new(seed, 2);
        let img = RgbImage::from_fn(w, h, |_, _| Rgb([0, 1, 2].map(|_| rng.below(256) as u8)));
        let gt = GrayImage::from_fn(w, h, |_, _| Luma([if rng.uniform() < 0.2 { 255 } else { 0 }]));
        let mask = GrayImage::from_fn(w, h, |_, _| Luma([if rng.uniform() < 0.8 { 255 } else { 0 }]));
        let opts = PreprocessOptions::new(kinds[kind], target);
        let p = preprocess("fuzz", &img, &gt, with_mask.then_some(&mask), &opts).unwrap();
        prop_assert_eq!(p.image.shape(), &[3, target, target]);
        prop_assert_eq!(p.segmentation.shape(), &[1, target, target]);
        prop_assert!(p.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert!(p.segmentation.data().iter().all(|&v| v == -1.0 || v == 1.0));
        if let Some(m) = &p.mask {
            prop_assert_eq!(m.shape(), &[1, target, target]);
            prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let plane = target * target;
            for (i, &mv) in m.data().iter().enumerate() {
                if mv == 0.0 {
                    for ch in 0..3 {
                        prop_assert_eq!(p.image.data()[ch * plane + i], -1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn losses_have_the_declared_sign(d_real in 0.0f32..1.0, d_fake in 0.0f32..1.0) {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::scalar(d_real));
        let f = tape.constant(Tensor::scalar(d_fake));
        let g = generator_gan_loss(&mut tape, f);
        let d = discriminator_loss(&mut tape, r, f);
        prop_assert!(tape.value(g).item() >= 0.0);
        prop_assert!(tape.value(d).item() <= 0.0);
    }

    #[test]
    fn style_and_content_ignore_spatial_arrangement(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed: u64) {
        let a = tensor_from(vec![c, h, w], seed);
        let b = tensor_from(vec![c, h, w], seed ^ 0x9e37);
        let mut perm: Vec<usize> = (0..h * w).collect();
        SeedStream::new(seed, 3).shuffle(&mut perm);
        let shuffle = |t: &Tensor| {
            let plane = h * w;
            let d = t.data();
            let out = (0..c).flat_map(|ch| perm.iter().map(move |&k| d[ch * plane + k])).collect();
            Tensor::new(vec![c, h, w], out).unwrap()
        };
        let weights = LossWeights::default();
        let eval = |x: &Tensor, y: &Tensor| {
            let mut tape = Tape::new();
            let fx = FeatureStack { maps: BTreeMap::from([((1, 1), tape.constant(x.clone()))]) };
            let fy = FeatureStack { maps: BTreeMap::from([((1, 1), tape.constant(y.clone()))]) };
            let s = style_loss(&mut tape, &fx, &fy, &weights).unwrap();
            let k = content_loss(&mut tape, &fx, &fy).unwrap();
            (tape.value(s).item(), tape.value(k).item())
        };
        let (s0, k0) = eval(&a, &b);
        let (s1, k1) = eval(&shuffle(&a), &shuffle(&b));
        prop_assert!(s0 >= 0.0 && k0 >= 0.0);
        prop_assert!((s0 - s1).abs() <= 1e-4 * s0.abs().max(1.0), "style {} vs {}", s0, s1);
        prop_assert!((k0 - k1).abs() <= 1e-4 * k0.abs().max(1.0), "content {} vs {}", k0, k1);
    }

    #[test]
    fn concat_gradient_partitions_upstream(ca in 1usize..4, cb in 1usize..4, h in 1usize..5, w in 1usize..5, seed: u64) {
        let mut tape = Tape::new();
        let a = tape.param(tensor_from(vec![ca, h, w], seed));
        let b = tape.param(tensor_from(vec![cb, h, w], seed + 1));
        let up = tensor_from(vec![ca + cb, h, w], seed + 2);
        let cat = tape.concat_channels(a, b).unwrap();
        let u = tape.constant(up.clone());
        let prod = tape.mul(cat, u).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        let joined: Vec<f32> = g.wrt(a).data().iter().chain(g.wrt(b).data()).copied().collect();
        prop_assert_eq!(joined.as_slice(), up.data());
    }

    #[test]
    fn strided_conv_halves_and_transpose_doubles(c in 1usize..3, half in 1usize..9, seed: u64) {
        let n = 2 * half;
        let mut tape = Tape::new();
        let x = tape.constant(tensor_from(vec![c, n, n], seed));
        let k = tape.constant(tensor_from(vec![2, c, 4, 4], seed + 1));
        let b = tape.constant(Tensor::zeros(&[2]));
        let down = tape.conv2d(x, k, b, 2, 1).unwrap();
        prop_assert_eq!(tape.shape(down), &[2, half, half]);
        let kt = tape.constant(tensor_from(vec![2, c, 4, 4], seed + 2));
        let bt = tape.constant(Tensor::zeros(&[c]));
        let up = tape.conv_transpose2d(down, kt, bt, 2, 1).unwrap();
        prop_assert_eq!(tape.shape(up), &[c, n, n]);
    }

    #[test]
    fn forward_is_bit_identical(c in 1usize..3, n in 2usize..9, seed: u64) {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(tensor_from(vec![c, n, n], seed));
            let k = tape.constant(tensor_from(vec![3, c, 3, 3], seed + 1));
            let b = tape.constant(tensor_from(vec![3], seed + 2));
            let y = tape.conv2d(x, k, b, 1, 1).unwrap();
            let g = tape.gram(y).unwrap();
            tape.value(g).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
