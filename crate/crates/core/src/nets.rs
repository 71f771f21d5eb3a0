//! Generator and discriminator topologies.
//!
//! Both networks are stacks of 4×4, stride-2, pad-1 convolutions so every
//! encoder layer halves the spatial size and every decoder layer doubles it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{truncated_normal, Layers, NetworkParams};
use crate::rng::SeedStream;
use crate::tape::{BatchNormConfig, Mode, RunningStats, Tape, Var, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

/// Where the noise code enters the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseInjection {
    /// Affine map to the bottleneck grid, concatenated with the deepest
    /// encoder features.
    Bottleneck,
    /// Affine map to one full-resolution plane, concatenated with the input
    /// segmentation.
    Input,
}

impl NoiseInjection {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseInjection::Bottleneck => "bottleneck",
            NoiseInjection::Input => "input",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bottleneck" => Ok(NoiseInjection::Bottleneck),
            "input" => Ok(NoiseInjection::Input),
            _ => Err(Error::Config(format!("unknown noise injection {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_filters: usize,
    pub max_filters: usize,
    pub z_dim: usize,
    /// Number of stride-2 encoder layers.
    pub depth: usize,
    /// Channels of the reshaped noise map at the bottleneck.
    pub z_channels: usize,
    pub skip_connections: bool,
    pub noise_injection: NoiseInjection,
}

impl GeneratorConfig {
    /// 64×64 input, 8 base filters, 16-dim noise, 4×4 bottleneck.
    pub fn desk() -> Self {
        Self::for_size(64, 8, 512, 16, 4)
    }

    /// 512×512 input, filters 32 doubling to 512, 400-dim noise, 8×8 bottleneck.
    pub fn full() -> Self {
        Self::for_size(512, 32, 512, 400, 6)
    }

    pub fn for_size(image_size: usize, base_filters: usize, max_filters: usize, z_dim: usize, depth: usize) -> Self {
        let bottleneck = filters_at(base_filters, max_filters, depth.saturating_sub(1));
        Self {
            image_size,
            in_channels: 1,
            out_channels: 3,
            base_filters,
            max_filters,
            z_dim,
            depth,
            z_channels: (bottleneck / 2).max(1),
            skip_connections: true,
            noise_injection: NoiseInjection::Bottleneck,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() {
            return Err(Error::Config(format!("image_size {} is not a power of two", self.image_size)));
        }
        if self.depth == 0 || self.image_size >> self.depth < 4 {
            return Err(Error::Config(format!(
                "depth {} leaves a bottleneck below 4x4 for image_size {}",
                self.depth, self.image_size
            )));
        }
        if self.base_filters == 0 || self.z_dim == 0 || self.z_channels == 0 {
            return Err(Error::Config("filters, z_dim and z_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_filters(&self, level: usize) -> usize {
        filters_at(self.base_filters, self.max_filters, level)
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.depth
    }

    /// Parameter names and shapes, plus batch-norm layers with channel counts.
    pub fn layout(&self) -> Layout {
        let mut p = Vec::new();
        let mut bn = Vec::new();
        let k = KERNEL;
        let mut in_c = self.in_channels;
        if self.noise_injection == NoiseInjection::Input {
            let plane = self.image_size * self.image_size;
            p.push(("noise/fc/weight".into(), vec![plane, self.z_dim]));
            p.push(("noise/fc/bias".into(), vec![plane]));
            in_c += 1;
        }
        for i in 0..self.depth {
            let out_c = self.encoder_filters(i);
            p.push((format!("enc{i}/conv/kernel"), vec![out_c, in_c, k, k]));
            p.push((format!("enc{i}/conv/bias"), vec![out_c]));
            bn.push((format!("enc{i}/bn"), out_c));
            in_c = out_c;
        }
        if self.noise_injection == NoiseInjection::Bottleneck {
            let b = self.bottleneck_size();
            let n = self.z_channels * b * b;
            p.push(("noise/fc/weight".into(), vec![n, self.z_dim]));
            p.push(("noise/fc/bias".into(), vec![n]));
            in_c += self.z_channels;
        }
        for j in (1..self.depth).rev() {
            let out_c = self.encoder_filters(j - 1);
            p.push((format!("dec{j}/deconv/kernel"), vec![in_c, out_c, k, k]));
            p.push((format!("dec{j}/deconv/bias"), vec![out_c]));
            bn.push((format!("dec{j}/bn"), out_c));
            in_c = if self.skip_connections { 2 * out_c } else { out_c };
        }
        p.push(("out/deconv/kernel".into(), vec![in_c, self.out_channels, k, k]));
        p.push(("out/deconv/bias".into(), vec![self.out_channels]));
        (p, bn)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    /// RGB image plus segmentation channel.
    pub in_channels: usize,
    pub base_filters: usize,
    pub max_filters: usize,
    pub depth: usize,
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self { image_size: 64, in_channels: 4, base_filters: 8, max_filters: 512, depth: 4 }
    }

    /// Filters 32 doubling to 512 over five stride-2 layers.
    pub fn full() -> Self {
        Self { image_size: 512, in_channels: 4, base_filters: 32, max_filters: 512, depth: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.depth == 0 || self.image_size >> self.depth == 0 {
            return Err(Error::Config(format!(
                "discriminator depth {} incompatible with image_size {}",
                self.depth, self.image_size
            )));
        }
        Ok(())
    }

    pub fn filters(&self, level: usize) -> usize {
        filters_at(self.base_filters, self.max_filters, level)
    }

    pub fn layout(&self) -> Layout {
        let mut p = Vec::new();
        let mut bn = Vec::new();
        let mut in_c = self.in_channels;
        for i in 0..self.depth {
            let out_c = self.filters(i);
            p.push((format!("d{i}/conv/kernel"), vec![out_c, in_c, KERNEL, KERNEL]));
            p.push((format!("d{i}/conv/bias"), vec![out_c]));
            if i > 0 {
                bn.push((format!("d{i}/bn"), out_c));
            }
            in_c = out_c;
        }
        let s = self.image_size >> self.depth;
        p.push(("head/fc/weight".into(), vec![1, in_c * s * s]));
        p.push(("head/fc/bias".into(), vec![1]));
        (p, bn)
    }
}

/// Named parameter shapes and batch-norm channel counts of one network.
pub type Layout = (Vec<(String, Vec<usize>)>, Vec<(String, usize)>);

fn filters_at(base: usize, max: usize, level: usize) -> usize {
    base.saturating_mul(1usize << level.min(30)).min(max)
}

/// Build parameters for a layout: kernels and weights from the truncated
/// normal in layout order, biases and shifts zero, scales one.
pub fn init_layout(layout: &Layout, seed: u64) -> NetworkParams {
    let mut rng = SeedStream::new(seed, 0);
    let mut params = NetworkParams::new();
    for (name, shape) in &layout.0 {
        let n: usize = shape.iter().product();
        let t = if name.ends_with("/kernel") || name.ends_with("/weight") {
            Tensor::new(shape.clone(), (0..n).map(|_| truncated_normal(&mut rng)).collect()).unwrap()
        } else {
            Tensor::zeros(shape)
        };
        params.insert(name.clone(), t);
    }
    for (name, c) in &layout.1 {
        params.insert(format!("{name}/gamma"), Tensor::ones(&[*c]));
        params.insert(format!("{name}/beta"), Tensor::zeros(&[*c]));
        params.stats.insert(name.clone(), RunningStats::new(*c));
    }
    params
}

fn check_layout(what: &str, layout: &Layout, params: &NetworkParams) -> Result<()> {
    let expected = layout.0.len() + 2 * layout.1.len();
    if params.tensors.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "{what} parameters do not match config: expected {expected} tensors, found {}",
            params.tensors.len()
        )));
    }
    for (name, shape) in &layout.0 {
        let t = params.get(name)?;
        if t.shape() != &shape[..] {
            return Err(Error::InvalidArgument(format!(
                "{what} parameter {name} has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
    }
    for (name, c) in &layout.1 {
        match params.stats.get(name) {
            Some(s) if s.channels() == *c => {}
            _ => return Err(Error::InvalidArgument(format!("{what} running stats {name} missing or mis-sized"))),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params(&self, seed: u64) -> NetworkParams {
        init_layout(&self.config.layout(), seed)
    }

    pub fn check_params(&self, params: &NetworkParams) -> Result<()> {
        check_layout("generator", &self.config.layout(), params)
    }

    /// Tape-level forward pass producing a `[3, H, W]` phantom in `[-1, 1]`.
    pub fn forward(&self, l: &mut Layers<'_>, y: Var, z: Var) -> Result<Var> {
        let c = &self.config;
        let s = c.image_size;
        if l.tape.shape(y) != [c.in_channels, s, s] {
            return Err(Error::shape(
                "generator_forward",
                format!("segmentation {:?}, config expects [{}, {s}, {s}]", l.tape.shape(y), c.in_channels),
            ));
        }
        if l.tape.shape(z) != [c.z_dim] {
            return Err(Error::shape(
                "generator_forward",
                format!("noise {:?}, expected [{}]", l.tape.shape(z), c.z_dim),
            ));
        }

        let mut h = y;
        if c.noise_injection == NoiseInjection::Input {
            let plane = l.affine("noise/fc", z)?;
            let plane = l.tape.reshape(plane, &[1, s, s])?;
            h = l.tape.concat_channels(h, plane)?;
        }
        let mut skips = Vec::with_capacity(c.depth);
        for i in 0..c.depth {
            h = l.conv(&format!("enc{i}/conv"), h, STRIDE, PAD)?;
            h = l.batch_norm(&format!("enc{i}/bn"), h)?;
            h = l.tape.leaky_relu(h, LEAKY_SLOPE);
            skips.push(h);
        }
        if c.noise_injection == NoiseInjection::Bottleneck {
            let b = c.bottleneck_size();
            let zmap = l.affine("noise/fc", z)?;
            let zmap = l.tape.reshape(zmap, &[c.z_channels, b, b])?;
            h = l.tape.concat_channels(h, zmap)?;
        }
        for j in (1..c.depth).rev() {
            h = l.conv_transpose(&format!("dec{j}/deconv"), h, STRIDE, PAD)?;
            h = l.batch_norm(&format!("dec{j}/bn"), h)?;
            h = l.tape.leaky_relu(h, LEAKY_SLOPE);
            if c.skip_connections {
                h = l.tape.concat_channels(h, skips[j - 1])?;
            }
        }
        h = l.conv_transpose("out/deconv", h, STRIDE, PAD)?;
        Ok(l.tape.tanh(h))
    }

    /// Inference-mode forward on a private tape.
    pub fn infer(&self, params: &NetworkParams, y: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.run(params, y, z, Mode::Infer).map(|(t, _)| t)
    }

    /// Forward on a private tape; returns the phantom and the (possibly
    /// updated) running statistics.
    pub fn run(
        &self,
        params: &NetworkParams,
        y: &Tensor,
        z: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, BTreeMap<String, RunningStats>)> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let mut stats = params.stats.clone();
        let yv = tape.constant(y.clone());
        let zv = tape.constant(z.clone());
        let mut l = Layers { tape: &mut tape, bound: &bound, stats: &mut stats, mode, bn: BatchNormConfig::default() };
        let out = self.forward(&mut l, yv, zv)?;
        Ok((tape.value(out).clone(), stats))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params(&self, seed: u64) -> NetworkParams {
        init_layout(&self.config.layout(), seed)
    }

    pub fn check_params(&self, params: &NetworkParams) -> Result<()> {
        check_layout("discriminator", &self.config.layout(), params)
    }

    /// Probability that `(x, y)` is a real pair; shape `[1]`.
    pub fn forward(&self, l: &mut Layers<'_>, x: Var, y: Var) -> Result<Var> {
        let c = &self.config;
        let s = c.image_size;
        let xs = l.tape.shape(x);
        let ys = l.tape.shape(y);
        if xs.len() != 3 || ys.len() != 3 || xs[1..] != [s, s] || ys[1..] != [s, s] || xs[0] + ys[0] != c.in_channels {
            return Err(Error::shape(
                "discriminator_forward",
                format!("image {xs:?} and segmentation {ys:?} for a {s}x{s}, {}-channel discriminator", c.in_channels),
            ));
        }
        let mut h = l.tape.concat_channels(x, y)?;
        for i in 0..c.depth {
            h = l.conv(&format!("d{i}/conv"), h, STRIDE, PAD)?;
            if i > 0 {
                h = l.batch_norm(&format!("d{i}/bn"), h)?;
            }
            h = l.tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let n = l.tape.value(h).numel();
        h = l.tape.reshape(h, &[n])?;
        let logit = l.affine("head/fc", h)?;
        Ok(l.tape.sigmoid(logit))
    }

    pub fn infer(&self, params: &NetworkParams, x: &Tensor, y: &Tensor) -> Result<f32> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let mut stats = params.stats.clone();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let mut l = Layers {
            tape: &mut tape,
            bound: &bound,
            stats: &mut stats,
            mode: Mode::Infer,
            bn: BatchNormConfig::default(),
        };
        let d = self.forward(&mut l, xv, yv)?;
        Ok(tape.value(d).item())
    }
}

/// i.i.d. zero-mean Gaussian noise code with standard deviation `std`.
pub fn sample_noise(z_dim: usize, std: f32, rng: &mut SeedStream) -> Result<Tensor> {
    if std.is_nan() || std <= 0.0 {
        return Err(Error::InvalidArgument(format!("noise std must be > 0, got {std}")));
    }
    let data = (0..z_dim).map(|_| (rng.normal() * std as f64) as f32).collect();
    Ok(Tensor::from_vec(data))
}
