//! Frozen multi-block convolutional feature extractor for perceptual losses.
//!
//! Blocks and layers are indexed from 1: `(block, layer)` names the output of
//! the `layer`-th 3×3 convolution (after its activation) in block `block`.
//! Every block ends in a 2×2 average pool.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::params::{Bound, NetworkParams};
use crate::rng::SeedStream;
use crate::tape::{Tape, Var, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub type LayerId = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub enum WeightsSource {
    SeededRandom(u64),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetConfig {
    pub in_channels: usize,
    /// `(num_layers, channels)` per block.
    pub blocks: Vec<(usize, usize)>,
    pub style_selection: BTreeSet<LayerId>,
    pub content_selection: BTreeSet<LayerId>,
    pub weights_source: WeightsSource,
}

impl Default for FeatureNetConfig {
    /// Desk-scale channel plan `(8, 16, 32, 64, 64)`, two layers per block,
    /// style on the first layer of every block, content on `(4, 2)`.
    fn default() -> Self {
        Self {
            in_channels: 3,
            blocks: vec![(2, 8), (2, 16), (2, 32), (2, 64), (2, 64)],
            style_selection: (1..=5).map(|b| (b, 1)).collect(),
            content_selection: [(4, 2)].into_iter().collect(),
            weights_source: WeightsSource::SeededRandom(0x5eed),
        }
    }
}

impl FeatureNetConfig {
    /// VGG-19 block plan (2, 2, 4, 4, 4 layers; 64 to 512 channels).
    pub fn vgg19_plan() -> Self {
        Self { blocks: vec![(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|&(n, c)| n == 0 || c == 0) {
            return Err(Error::Config("feature net needs non-empty blocks".into()));
        }
        self.check_selection(&self.style_selection)?;
        self.check_selection(&self.content_selection)
    }

    pub fn check_selection(&self, sel: &BTreeSet<LayerId>) -> Result<()> {
        if sel.is_empty() {
            return Err(Error::InvalidArgument("empty feature selection".into()));
        }
        for &(b, l) in sel {
            if b == 0 || b > self.blocks.len() || l == 0 || l > self.blocks[b - 1].0 {
                return Err(Error::InvalidArgument(format!("feature layer ({b}, {l}) does not exist")));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count: Σ (3·3·c_in·c_out + c_out).
    pub fn param_count(&self) -> usize {
        let mut in_c = self.in_channels;
        let mut total = 0;
        for &(n, c) in &self.blocks {
            for _ in 0..n {
                total += 9 * in_c * c + c;
                in_c = c;
            }
        }
        total
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_c = self.in_channels;
        for (bi, &(n, c)) in self.blocks.iter().enumerate() {
            for li in 0..n {
                let name = layer_name((bi + 1, li + 1));
                out.push((format!("{name}/kernel"), vec![c, in_c, 3, 3]));
                out.push((format!("{name}/bias"), vec![c]));
                in_c = c;
            }
        }
        out
    }
}

fn layer_name((b, l): LayerId) -> String {
    format!("block{b}/conv{l}")
}

/// Activations at selected layers, recorded on a tape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStack {
    pub maps: BTreeMap<LayerId, Var>,
}

/// A frozen feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    pub config: FeatureNetConfig,
    pub params: NetworkParams,
}

impl FeatureNet {
    pub fn build(config: FeatureNetConfig) -> Result<Self> {
        config.validate()?;
        let params = match &config.weights_source {
            WeightsSource::SeededRandom(seed) => random_weights(&config, *seed),
            WeightsSource::File(path) => {
                let ck = checkpoint::Container::read(path)?;
                let mut p = NetworkParams::new();
                for (name, shape) in config.layout() {
                    let t = ck.tensor(&name)?;
                    if t.shape() != &shape[..] {
                        return Err(Error::Checkpoint(format!(
                            "{}: {name} has shape {:?}, expected {shape:?}",
                            path.display(),
                            t.shape()
                        )));
                    }
                    p.insert(name, t.clone());
                }
                p
            }
        };
        Ok(Self { config, params })
    }

    /// Record the frozen weights on `tape`; they never receive gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape, false)
    }

    /// Run blocks until every selected layer is reached.
    pub fn extract(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        selection: &BTreeSet<LayerId>,
    ) -> Result<FeatureStack> {
        self.config.check_selection(selection)?;
        let (c, h, w) = match tape.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::shape("extract_features", format!("expected [C,H,W], got {s:?}"))),
        };
        let div = 1usize << self.config.blocks.len();
        if c != self.config.in_channels || h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "extract_features",
                format!(
                    "input [{c}, {h}, {w}] needs {} channels and sides divisible by {div}",
                    self.config.in_channels
                ),
            ));
        }
        let last_block = selection.iter().map(|&(b, _)| b).max().unwrap_or(0);
        let mut maps = BTreeMap::new();
        let mut h = x;
        for (bi, &(n, _)) in self.config.blocks.iter().enumerate().take(last_block) {
            let b = bi + 1;
            for l in 1..=n {
                let name = layer_name((b, l));
                let k = bound.var(&format!("{name}/kernel"))?;
                let bias = bound.var(&format!("{name}/bias"))?;
                h = tape.conv2d(h, k, bias, 1, 1)?;
                h = tape.leaky_relu(h, LEAKY_SLOPE);
                if selection.contains(&(b, l)) {
                    maps.insert((b, l), h);
                }
            }
            if b < last_block {
                h = tape.avg_pool2(h)?;
            }
        }
        Ok(FeatureStack { maps })
    }

    /// Tensor-valued extraction on a private tape.
    pub fn extract_tensors(&self, x: &Tensor, selection: &BTreeSet<LayerId>) -> Result<BTreeMap<LayerId, Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let stack = self.extract(&mut tape, &bound, xv, selection)?;
        Ok(stack.maps.into_iter().map(|(k, v)| (k, tape.value(v).clone())).collect())
    }
}

/// He-scaled normal weights (`std = sqrt(2 / fan_in)`), zero biases.
fn random_weights(config: &FeatureNetConfig, seed: u64) -> NetworkParams {
    let mut rng = SeedStream::new(seed, 0);
    let mut p = NetworkParams::new();
    for (name, shape) in config.layout() {
        let t = if name.ends_with("/kernel") {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let std = (2.0 / fan_in).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| (rng.normal() * std) as f32).collect()).unwrap()
        } else {
            Tensor::zeros(&shape)
        };
        p.insert(name, t);
    }
    p
}
