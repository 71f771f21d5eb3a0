//! Flat `section.key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. [`RunConfig::to_text`] writes every key, so a written config
//! reproduces the run on its own.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DatasetKind, PreprocessOptions};
use crate::error::{Error, Result};
use crate::evaluation::SegmenterConfig;
use crate::losses::L1Norm;
use crate::nets::NoiseInjection;
use crate::perceptual::{LayerId, WeightsSource};
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub crop_size: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { kind: DatasetKind::Generic, crop_size: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub seg: SegmenterConfig,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn optional<T: FromStr + PartialEq + Default>(key: &str, v: &str) -> Result<Option<T>> {
    let x: T = parse(key, v)?;
    Ok((x != T::default()).then_some(x))
}

fn parse_layers(key: &str, v: &str) -> Result<BTreeSet<LayerId>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let (b, l) = s
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("{key}: expected block.layer, got {s:?}")))?;
            Ok((parse(key, b)?, parse(key, l)?))
        })
        .collect()
}

fn fmt_layers(s: &BTreeSet<LayerId>) -> String {
    s.iter().map(|(b, l)| format!("{b}.{l}")).collect::<Vec<_>>().join(",")
}

fn parse_blocks(key: &str, v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(|s| {
            let (n, c) = s
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("{key}: expected layersxchannels, got {s:?}")))?;
            Ok((parse(key, n)?, parse(key, c)?))
        })
        .collect()
}

fn parse_block_weights(key: &str, v: &str) -> Result<BTreeMap<usize, f32>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let (b, w) = s
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("{key}: expected block:weight, got {s:?}")))?;
            Ok((parse(key, b)?, parse(key, w)?))
        })
        .collect()
}

/// Keys describing the networks and optimization of a training run.
pub fn train_config_to_kv(c: &TrainConfig) -> Vec<(String, String)> {
    let w = &c.loss_weights;
    let g = &c.generator;
    let d = &c.discriminator;
    let f = &c.feature_net;
    let kv: Vec<(&str, String)> = vec![
        ("train.epochs", c.epochs.to_string()),
        ("train.batch_size", c.batch_size.to_string()),
        ("train.lr_g", c.lr_g.to_string()),
        ("train.lr_d", c.lr_d.to_string()),
        ("train.g_steps_per_d", c.g_steps_per_d.to_string()),
        ("train.noise_std_train", c.noise_std_train.to_string()),
        ("train.noise_std_test", c.noise_std_test.to_string()),
        ("train.seed", c.seed.to_string()),
        ("train.mode", c.mode.as_str().to_string()),
        ("train.adam_beta1", c.adam_beta1.to_string()),
        ("train.adam_beta2", c.adam_beta2.to_string()),
        ("train.adam_eps", c.adam_eps.to_string()),
        ("train.checkpoint_every", c.checkpoint_every.to_string()),
        ("train.max_steps", c.max_steps.unwrap_or(0).to_string()),
        ("train.bn_eps", c.batch_norm.eps.to_string()),
        ("train.bn_momentum", c.batch_norm.momentum.to_string()),
        ("loss.lambda_dev", w.lambda_dev.to_string()),
        ("loss.w_cont", w.w_cont.to_string()),
        ("loss.w_sty", w.w_sty.to_string()),
        ("loss.w_tv", w.w_tv.to_string()),
        ("loss.block_weights", w.block_weights.iter().map(|(b, x)| format!("{b}:{x}")).collect::<Vec<_>>().join(",")),
        ("loss.l1_norm", w.l1_norm.as_str().to_string()),
        ("data.target_size", g.image_size.to_string()),
        ("gen.base_filters", g.base_filters.to_string()),
        ("gen.max_filters", g.max_filters.to_string()),
        ("gen.z_dim", g.z_dim.to_string()),
        ("gen.depth", g.depth.to_string()),
        ("gen.z_channels", g.z_channels.to_string()),
        ("gen.skip_connections", g.skip_connections.to_string()),
        ("gen.noise_injection", g.noise_injection.as_str().to_string()),
        ("disc.base_filters", d.base_filters.to_string()),
        ("disc.max_filters", d.max_filters.to_string()),
        ("disc.depth", d.depth.to_string()),
        ("feat.blocks", f.blocks.iter().map(|(n, ch)| format!("{n}x{ch}")).collect::<Vec<_>>().join(",")),
        ("feat.style_layers", fmt_layers(&f.style_selection)),
        ("feat.content_layers", fmt_layers(&f.content_selection)),
        (
            "feat.weights",
            match &f.weights_source {
                WeightsSource::SeededRandom(s) => format!("seed:{s}"),
                WeightsSource::File(p) => p.display().to_string(),
            },
        ),
    ];
    kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

impl RunConfig {
    /// Set one key. `data.target_size` resizes both networks.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let v = value.trim();
        match key {
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr_g" => t.lr_g = parse(key, v)?,
            "train.lr_d" => t.lr_d = parse(key, v)?,
            "train.g_steps_per_d" => t.g_steps_per_d = parse(key, v)?,
            "train.noise_std_train" => t.noise_std_train = parse(key, v)?,
            "train.noise_std_test" => t.noise_std_test = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.mode" => t.mode = TrainMode::parse(v)?,
            "train.adam_beta1" => t.adam_beta1 = parse(key, v)?,
            "train.adam_beta2" => t.adam_beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam_eps = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.max_steps" => t.max_steps = optional(key, v)?,
            "train.bn_eps" => t.batch_norm.eps = parse(key, v)?,
            "train.bn_momentum" => t.batch_norm.momentum = parse(key, v)?,
            "loss.lambda_dev" => t.loss_weights.lambda_dev = parse(key, v)?,
            "loss.w_cont" => t.loss_weights.w_cont = parse(key, v)?,
            "loss.w_sty" => t.loss_weights.w_sty = parse(key, v)?,
            "loss.w_tv" => t.loss_weights.w_tv = parse(key, v)?,
            "loss.block_weights" => t.loss_weights.block_weights = parse_block_weights(key, v)?,
            "loss.l1_norm" => t.loss_weights.l1_norm = L1Norm::parse(v)?,
            "data.target_size" => {
                let s = parse(key, v)?;
                t.generator.image_size = s;
                t.discriminator.image_size = s;
            }
            "data.kind" => self.data.kind = DatasetKind::parse(v)?,
            "data.crop_size" => self.data.crop_size = optional(key, v)?,
            "gen.base_filters" => t.generator.base_filters = parse(key, v)?,
            "gen.max_filters" => t.generator.max_filters = parse(key, v)?,
            "gen.z_dim" => t.generator.z_dim = parse(key, v)?,
            "gen.depth" => t.generator.depth = parse(key, v)?,
            "gen.z_channels" => t.generator.z_channels = parse(key, v)?,
            "gen.skip_connections" => t.generator.skip_connections = parse_bool(key, v)?,
            "gen.noise_injection" => t.generator.noise_injection = NoiseInjection::parse(v)?,
            "disc.base_filters" => t.discriminator.base_filters = parse(key, v)?,
            "disc.max_filters" => t.discriminator.max_filters = parse(key, v)?,
            "disc.depth" => t.discriminator.depth = parse(key, v)?,
            "feat.blocks" => t.feature_net.blocks = parse_blocks(key, v)?,
            "feat.style_layers" => t.feature_net.style_selection = parse_layers(key, v)?,
            "feat.content_layers" => t.feature_net.content_selection = parse_layers(key, v)?,
            "feat.weights" => {
                t.feature_net.weights_source = match v.strip_prefix("seed:") {
                    Some(s) => WeightsSource::SeededRandom(parse(key, s)?),
                    None => WeightsSource::File(PathBuf::from(v)),
                }
            }
            "seg.patch_size" => self.seg.patch_size = parse(key, v)?,
            "seg.hidden1" => self.seg.hidden.0 = parse(key, v)?,
            "seg.hidden2" => self.seg.hidden.1 = parse(key, v)?,
            "seg.patches" => self.seg.patches = optional(key, v)?,
            "seg.batch_size" => self.seg.batch_size = parse(key, v)?,
            "seg.lr" => self.seg.lr = parse(key, v)?,
            "seg.epochs" => self.seg.epochs = parse(key, v)?,
            "seg.threshold" => self.seg.threshold = parse(key, v)?,
            "seg.seed" => self.seg.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = train_config_to_kv(&self.train);
        let s = &self.seg;
        let more = [
            ("data.kind", self.data.kind.as_str().to_string()),
            ("data.crop_size", self.data.crop_size.unwrap_or(0).to_string()),
            ("seg.patch_size", s.patch_size.to_string()),
            ("seg.hidden1", s.hidden.0.to_string()),
            ("seg.hidden2", s.hidden.1.to_string()),
            ("seg.patches", s.patches.unwrap_or(0).to_string()),
            ("seg.batch_size", s.batch_size.to_string()),
            ("seg.lr", s.lr.to_string()),
            ("seg.epochs", s.epochs.to_string()),
            ("seg.threshold", s.threshold.to_string()),
            ("seg.seed", s.seed.to_string()),
        ];
        kv.extend(more.into_iter().map(|(k, v)| (k.to_string(), v)));
        kv.sort();
        kv
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Apply `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn preprocess_options(&self) -> PreprocessOptions {
        PreprocessOptions {
            kind: self.data.kind,
            target_size: self.train.generator.image_size,
            crop_size: self.data.crop_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.seg.validate()
    }
}
