//! Alternating adversarial optimization for both pipeline variants.
//!
//! One training step visits one example: `g_steps_per_d` generator updates
//! (Adam, fresh noise each) followed by one discriminator update
//! (gradient ascent on its log-likelihood objective).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::nets::{sample_noise, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::optim::{adam_step, sgd_ascent_step, AdamConfig, AdamState};
use crate::params::{Layers, NetworkParams};
use crate::perceptual::{FeatureNet, FeatureNetConfig, FeatureStack, LayerId};
use crate::rng::{SeedStream, StreamPosition};
use crate::tape::{BatchNormConfig, Mode, Tape};
use crate::tensor::Tensor;

const NOISE_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 1 << 32;
const SYNTH_STREAM: u64 = 7;
const GEN_INIT_OFFSET: u64 = 0x6e6;
const DISC_INIT_OFFSET: u64 = 0xd15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Adversarial term plus weighted L1 deviation.
    Gan,
    /// Adversarial term plus style-transfer loss against one style image.
    Sgan,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Gan => "gan",
            TrainMode::Sgan => "sgan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gan" => Ok(TrainMode::Gan),
            "sgan" => Ok(TrainMode::Sgan),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr_g: f32,
    pub lr_d: f32,
    pub g_steps_per_d: usize,
    pub noise_std_train: f32,
    pub noise_std_test: f32,
    pub seed: u64,
    pub mode: TrainMode,
    pub loss_weights: LossWeights,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub batch_norm: BatchNormConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub feature_net: FeatureNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1,
            lr_g: 2e-4,
            lr_d: 1e-4,
            g_steps_per_d: 2,
            noise_std_train: 0.001,
            noise_std_test: 1.0,
            seed: 0,
            mode: TrainMode::Gan,
            loss_weights: LossWeights::default(),
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            max_steps: None,
            batch_norm: BatchNormConfig::default(),
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            feature_net: FeatureNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.g_steps_per_d == 0 {
            return Err(Error::Config("g_steps_per_d must be >= 1".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!("only batch_size 1 is supported, got {}", self.batch_size)));
        }
        if !(self.noise_std_train > 0.0 && self.noise_std_test > 0.0) {
            return Err(Error::Config("noise standard deviations must be > 0".into()));
        }
        if self.generator.image_size != self.discriminator.image_size {
            return Err(Error::Config("generator and discriminator image sizes differ".into()));
        }
        self.loss_weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.mode == TrainMode::Sgan {
            self.feature_net.validate()?;
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr_g, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }
}

/// Per-step loss record, serialized as one JSON line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss_g_gan: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_dev: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_sty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_cont: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_tv: Option<f64>,
    pub loss_d: f64,
    pub wall_ms: u64,
}

impl StepMetrics {
    fn terms(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("loss_g_gan", self.loss_g_gan), ("loss_d", self.loss_d)];
        for (k, o) in [
            ("loss_dev", self.loss_dev),
            ("loss_sty", self.loss_sty),
            ("loss_cont", self.loss_cont),
            ("loss_tv", self.loss_tv),
        ] {
            if let Some(x) = o {
                v.push((k, x));
            }
        }
        v
    }

    pub fn all_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite())
    }

    /// The record with wall-clock time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self { wall_ms: 0, ..self.clone() }
    }
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generator: NetworkParams,
    pub discriminator: NetworkParams,
    pub adam: AdamState,
    /// Completed training steps.
    pub step: u64,
    pub noise: SeedStream,
}

/// Fixed pieces of a run: networks, frozen feature net and cached targets.
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    style: Option<StyleTargets>,
}

struct StyleTargets {
    net: FeatureNet,
    style_features: BTreeMap<LayerId, Tensor>,
    /// Content features of each training image, by dataset index.
    content_features: Vec<BTreeMap<LayerId, Tensor>>,
}

impl Trainer {
    /// Validate the config against the dataset and precompute frozen-network
    /// targets for the style variant.
    pub fn new(config: TrainConfig, dataset: &[ImagePair], style: Option<&ImagePair>) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let s = config.generator.image_size;
        for p in dataset {
            if p.image.shape() != [3, s, s] || p.segmentation.shape() != [1, s, s] {
                return Err(Error::shape(
                    "train",
                    format!("pair {} is {:?}, generator expects {s}x{s}", p.id, p.image.shape()),
                ));
            }
        }
        let style = match (config.mode, style) {
            (TrainMode::Gan, None) => None,
            (TrainMode::Gan, Some(_)) => {
                return Err(Error::InvalidArgument("a style image is only used in sgan mode".into()))
            }
            (TrainMode::Sgan, None) => return Err(Error::InvalidArgument("sgan mode needs a style image".into())),
            (TrainMode::Sgan, Some(st)) => {
                if st.image.shape() != [3, s, s] {
                    return Err(Error::shape(
                        "train",
                        format!("style image {:?}, expected [3, {s}, {s}]", st.image.shape()),
                    ));
                }
                let net = FeatureNet::build(config.feature_net.clone())?;
                let style_features = net.extract_tensors(&st.image, &config.feature_net.style_selection)?;
                let content_features = dataset
                    .iter()
                    .map(|p| net.extract_tensors(&p.image, &config.feature_net.content_selection))
                    .collect::<Result<Vec<_>>>()?;
                Some(StyleTargets { net, style_features, content_features })
            }
        };
        Ok(Self {
            generator: Generator::new(config.generator.clone())?,
            discriminator: Discriminator::new(config.discriminator.clone())?,
            config,
            style,
        })
    }

    pub fn feature_net(&self) -> Option<&FeatureNet> {
        self.style.as_ref().map(|s| &s.net)
    }

    pub fn init_state(&self) -> TrainState {
        let generator = self.generator.init_params(self.config.seed.wrapping_add(GEN_INIT_OFFSET));
        let discriminator = self.discriminator.init_params(self.config.seed.wrapping_add(DISC_INIT_OFFSET));
        TrainState {
            adam: AdamState::new(&generator),
            generator,
            discriminator,
            step: 0,
            noise: SeedStream::new(self.config.seed, NOISE_STREAM),
        }
    }

    /// Total steps the run will take for a dataset of `n` examples.
    pub fn total_steps(&self, n: usize) -> u64 {
        let full = self.config.epochs * n as u64;
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    /// Dataset index visited at global step `step`.
    pub fn example_at(&self, step: u64, n: usize) -> usize {
        let epoch = step / n as u64;
        let mut order: Vec<usize> = (0..n).collect();
        SeedStream::new(self.config.seed, SHUFFLE_STREAM + epoch).shuffle(&mut order);
        order[(step % n as u64) as usize]
    }

    /// One alternating step on dataset example `index`.
    pub fn train_step(&self, state: &mut TrainState, dataset: &[ImagePair], index: usize) -> Result<StepMetrics> {
        let started = Instant::now();
        let pair = &dataset[index];
        let epoch = state.step / dataset.len() as u64;
        let mut first: Option<StepMetrics> = None;
        for _ in 0..self.config.g_steps_per_d {
            let m = self.generator_update(state, pair, index, epoch)?;
            first.get_or_insert(m);
        }
        let loss_d = self.discriminator_update(state, pair)?;
        let mut metrics = first.expect("g_steps_per_d >= 1");
        metrics.loss_d = loss_d;
        metrics.wall_ms = started.elapsed().as_millis() as u64;
        if !metrics.all_finite() {
            let dump = self.dump_state(state)?;
            let what = metrics
                .terms()
                .into_iter()
                .filter(|(_, v)| !v.is_finite())
                .map(|(k, _)| k)
                .collect::<Vec<_>>()
                .join(",");
            return Err(Error::NonFinite { what, step: state.step, dump });
        }
        state.step += 1;
        Ok(metrics)
    }

    fn generator_update(
        &self,
        state: &mut TrainState,
        pair: &ImagePair,
        index: usize,
        epoch: u64,
    ) -> Result<StepMetrics> {
        let cfg = &self.config;
        let z = sample_noise(cfg.generator.z_dim, cfg.noise_std_train, &mut state.noise)?;
        let mut tape = Tape::new();
        let gb = state.generator.bind(&mut tape, true);
        let db = state.discriminator.bind(&mut tape, false);
        let y = tape.constant(pair.segmentation.clone());
        let x = tape.constant(pair.image.clone());
        let zv = tape.constant(z);

        let mut gen_stats = state.generator.stats.clone();
        // The discriminator's running statistics only move during its own update.
        let mut disc_stats = state.discriminator.stats.clone();
        let x_hat = {
            let mut l =
                Layers { tape: &mut tape, bound: &gb, stats: &mut gen_stats, mode: Mode::Train, bn: cfg.batch_norm };
            self.generator.forward(&mut l, y, zv)?
        };
        let d_fake = {
            let mut l =
                Layers { tape: &mut tape, bound: &db, stats: &mut disc_stats, mode: Mode::Train, bn: cfg.batch_norm };
            self.discriminator.forward(&mut l, x_hat, y)?
        };

        let w = &cfg.loss_weights;
        let mut metrics = StepMetrics {
            step: state.step,
            epoch,
            loss_g_gan: 0.0,
            loss_dev: None,
            loss_sty: None,
            loss_cont: None,
            loss_tv: None,
            loss_d: 0.0,
            wall_ms: 0,
        };
        let total = match (&self.style, cfg.mode) {
            (None, _) => {
                let t = losses::generator_total_loss_gan(&mut tape, d_fake, x, x_hat, w)?;
                metrics.loss_g_gan = tape.value(t.gan).item() as f64;
                metrics.loss_dev = Some(tape.value(t.dev).item() as f64);
                t.total
            }
            (Some(st), _) => {
                let fcfg = &cfg.feature_net;
                let fb = st.net.bind(&mut tape);
                let union: BTreeSet<LayerId> = fcfg.style_selection.union(&fcfg.content_selection).copied().collect();
                let hat = st.net.extract(&mut tape, &fb, x_hat, &union)?;
                let pick =
                    |sel: &BTreeSet<LayerId>| FeatureStack { maps: sel.iter().map(|id| (*id, hat.maps[id])).collect() };
                let hat_style = pick(&fcfg.style_selection);
                let hat_content = pick(&fcfg.content_selection);
                let constants = |tape: &mut Tape, m: &BTreeMap<LayerId, Tensor>| FeatureStack {
                    maps: m.iter().map(|(id, t)| (*id, tape.constant(t.clone()))).collect(),
                };
                let feat_style = constants(&mut tape, &st.style_features);
                let feat_x = constants(&mut tape, &st.content_features[index]);
                let terms =
                    losses::style_transfer_loss(&mut tape, &feat_x, &feat_style, &hat_content, &hat_style, x_hat, w)?;
                let t = losses::generator_total_loss_style(&mut tape, d_fake, terms)?;
                metrics.loss_g_gan = tape.value(t.gan).item() as f64;
                metrics.loss_sty = Some(tape.value(terms.style).item() as f64);
                metrics.loss_cont = Some(tape.value(terms.content).item() as f64);
                metrics.loss_tv = Some(tape.value(terms.tv).item() as f64);
                t.total
            }
        };
        if !tape.value(total).all_finite() {
            return Ok(metrics);
        }
        let grads = tape.backward(total)?;
        let g = gb.grads(&grads);
        adam_step(&mut state.generator, &g, &mut state.adam, &cfg.adam())?;
        state.generator.stats = gen_stats;
        Ok(metrics)
    }

    fn discriminator_update(&self, state: &mut TrainState, pair: &ImagePair) -> Result<f64> {
        let cfg = &self.config;
        let z = sample_noise(cfg.generator.z_dim, cfg.noise_std_train, &mut state.noise)?;
        let mut tape = Tape::new();
        let gb = state.generator.bind(&mut tape, false);
        let db = state.discriminator.bind(&mut tape, true);
        let y = tape.constant(pair.segmentation.clone());
        let x = tape.constant(pair.image.clone());
        let zv = tape.constant(z);
        let mut gen_stats = state.generator.stats.clone();
        let mut disc_stats = state.discriminator.stats.clone();
        let x_hat = {
            let mut l =
                Layers { tape: &mut tape, bound: &gb, stats: &mut gen_stats, mode: Mode::Train, bn: cfg.batch_norm };
            self.generator.forward(&mut l, y, zv)?
        };
        let (d_real, d_fake) = {
            let mut l =
                Layers { tape: &mut tape, bound: &db, stats: &mut disc_stats, mode: Mode::Train, bn: cfg.batch_norm };
            let r = self.discriminator.forward(&mut l, x, y)?;
            let f = self.discriminator.forward(&mut l, x_hat, y)?;
            (r, f)
        };
        let objective = losses::discriminator_loss(&mut tape, d_real, d_fake);
        let value = tape.value(objective).item() as f64;
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = tape.backward(objective)?;
        sgd_ascent_step(&mut state.discriminator, &db.grads(&grads), cfg.lr_d)?;
        state.discriminator.stats = disc_stats;
        Ok(value)
    }

    /// Discriminator objective `ln D(x) + ln(1 − D(x̂))` on fixed inputs, without updating anything.
    pub fn discriminator_objective(&self, state: &TrainState, pair: &ImagePair, x_hat: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let db = state.discriminator.bind(&mut tape, false);
        let y = tape.constant(pair.segmentation.clone());
        let x = tape.constant(pair.image.clone());
        let xh = tape.constant(x_hat.clone());
        let mut stats = state.discriminator.stats.clone();
        let mut l =
            Layers { tape: &mut tape, bound: &db, stats: &mut stats, mode: Mode::Train, bn: self.config.batch_norm };
        let r = self.discriminator.forward(&mut l, x, y)?;
        let f = self.discriminator.forward(&mut l, xh, y)?;
        let o = losses::discriminator_loss(&mut tape, r, f);
        Ok(tape.value(o).item() as f64)
    }

    /// Gradient-ascent step on the discriminator objective for fixed
    /// `(x, x̂, y)`; used to probe the update rule in isolation.
    pub fn discriminator_ascent_on(
        &self,
        state: &mut TrainState,
        pair: &ImagePair,
        x_hat: &Tensor,
        lr: f32,
    ) -> Result<()> {
        let mut tape = Tape::new();
        let db = state.discriminator.bind(&mut tape, true);
        let y = tape.constant(pair.segmentation.clone());
        let x = tape.constant(pair.image.clone());
        let xh = tape.constant(x_hat.clone());
        let mut stats = state.discriminator.stats.clone();
        let mut l =
            Layers { tape: &mut tape, bound: &db, stats: &mut stats, mode: Mode::Train, bn: self.config.batch_norm };
        let r = self.discriminator.forward(&mut l, x, y)?;
        let f = self.discriminator.forward(&mut l, xh, y)?;
        let o = losses::discriminator_loss(&mut tape, r, f);
        let grads = tape.backward(o)?;
        sgd_ascent_step(&mut state.discriminator, &db.grads(&grads), lr)
    }

    /// Run from `state.step` to the end of training, appending to the loss
    /// log and writing checkpoints under `out_dir` when given.
    pub fn run(
        &self,
        state: &mut TrainState,
        dataset: &[ImagePair],
        out_dir: Option<&Path>,
    ) -> Result<Vec<StepMetrics>> {
        self.run_until(state, dataset, out_dir, self.total_steps(dataset.len()))
    }

    pub fn run_until(
        &self,
        state: &mut TrainState,
        dataset: &[ImagePair],
        out_dir: Option<&Path>,
        stop_at: u64,
    ) -> Result<Vec<StepMetrics>> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
                let path = dir.join("loss.log");
                Some(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?,
                )
            }
            None => None,
        };
        let stop_at = stop_at.min(self.total_steps(dataset.len()));
        let mut out = Vec::new();
        while state.step < stop_at {
            let index = self.example_at(state.step, dataset.len());
            let m = self.train_step(state, dataset, index)?;
            if let Some(f) = log.as_mut() {
                let line = serde_json::to_string(&m).expect("metrics serialize");
                writeln!(f, "{line}").map_err(|e| Error::io("writing loss log", e))?;
            }
            out.push(m);
            if let (Some(dir), true) = (out_dir, self.config.checkpoint_every > 0) {
                if state.step.is_multiple_of(self.config.checkpoint_every) {
                    self.save(state, &dir.join(format!("ckpt-{:08}.fila", state.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save(state, &dir.join("final.fila"))?;
        }
        Ok(out)
    }

    pub fn to_container(&self, state: &TrainState) -> Container {
        let mut c = Container::new();
        for (k, v) in crate::config::train_config_to_kv(&self.config) {
            c.set(&format!("config.{k}"), v);
        }
        c.set("state.step", state.step);
        c.set("state.adam_step", state.adam.step);
        let pos = state.noise.position();
        c.set("rng.seed", pos.seed);
        c.set("rng.stream", pos.stream);
        c.set("rng.word_pos", pos.word_pos);
        c.insert_params("gen", &state.generator);
        c.insert_params("disc", &state.discriminator);
        for (k, t) in &state.adam.m {
            c.insert(format!("adam.m/{k}"), t.clone());
        }
        for (k, t) in &state.adam.v {
            c.insert(format!("adam.v/{k}"), t.clone());
        }
        c
    }

    pub fn save(&self, state: &TrainState, path: &Path) -> Result<()> {
        self.to_container(state).write(path)
    }

    /// Restore a state, checking it against this trainer's networks.
    pub fn state_from_container(&self, c: &Container) -> Result<TrainState> {
        let generator = c.extract_params("gen")?;
        let discriminator = c.extract_params("disc")?;
        self.generator.check_params(&generator)?;
        self.discriminator.check_params(&discriminator)?;
        let mut adam = AdamState { step: c.get_parsed("state.adam_step")?, ..AdamState::default() };
        for k in generator.tensors.keys() {
            adam.m.insert(k.clone(), c.tensor(&format!("adam.m/{k}"))?.clone());
            adam.v.insert(k.clone(), c.tensor(&format!("adam.v/{k}"))?.clone());
        }
        let noise = SeedStream::restore(StreamPosition {
            seed: c.get_parsed("rng.seed")?,
            stream: c.get_parsed("rng.stream")?,
            word_pos: c.get_parsed("rng.word_pos")?,
        });
        Ok(TrainState { generator, discriminator, adam, step: c.get_parsed("state.step")?, noise })
    }

    pub fn load(&self, path: &Path) -> Result<TrainState> {
        self.state_from_container(&Container::read(path)?)
    }

    fn dump_state(&self, state: &TrainState) -> Result<String> {
        let path: PathBuf =
            std::env::temp_dir().join(format!("fila-nonfinite-seed{}-step{}.fila", self.config.seed, state.step));
        self.save(state, &path)?;
        Ok(path.display().to_string())
    }
}

/// Train from scratch; see [`Trainer::run`].
pub fn train(
    dataset: &[ImagePair],
    config: &TrainConfig,
    style: Option<&ImagePair>,
    out_dir: Option<&Path>,
) -> Result<(TrainState, Vec<StepMetrics>)> {
    let trainer = Trainer::new(config.clone(), dataset, style)?;
    let mut state = trainer.init_state();
    let log = trainer.run(&mut state, dataset, out_dir)?;
    Ok((state, log))
}

/// `count` phantoms for one segmentation, each from a fresh noise code at
/// `std`, with batch norm in inference mode.
pub fn synthesize(
    generator: &Generator,
    params: &NetworkParams,
    y: &Tensor,
    count: usize,
    seed: u64,
    std: f32,
) -> Result<Vec<Tensor>> {
    let mut rng = SeedStream::new(seed, SYNTH_STREAM);
    (0..count)
        .map(|_| {
            let z = sample_noise(generator.config.z_dim, std, &mut rng)?;
            generator.infer(params, y, &z)
        })
        .collect()
}

/// Parse a loss log written by [`Trainer::run`].
pub fn read_loss_log(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("bad loss log line: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 100);
        assert_eq!(c.batch_size, 1);
        assert_eq!(c.lr_g, 0.0002);
        assert_eq!(c.lr_d, 0.0001);
        assert_eq!(c.g_steps_per_d, 2);
        assert_eq!(c.loss_weights.lambda_dev, 100.0);
        assert_eq!(c.noise_std_train, 0.001);
        assert_eq!(c.noise_std_test, 1.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            TrainConfig { lr_g: 0.0, ..TrainConfig::default() },
            TrainConfig { lr_d: -1.0, ..TrainConfig::default() },
            TrainConfig { g_steps_per_d: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 4, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(Trainer::new(TrainConfig::default(), &[], None), Err(Error::EmptyDataset)));
    }

    #[test]
    fn example_order_is_a_permutation_per_epoch() {
        let ds = crate::micro::generate_synthetic_micro_dataset(1, 64, 1).unwrap();
        let t = Trainer::new(TrainConfig::default(), &ds, None).unwrap();
        for epoch in 0..3u64 {
            let mut seen: Vec<usize> = (0..5).map(|i| t.example_at(epoch * 5 + i, 5)).collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
    }
}
