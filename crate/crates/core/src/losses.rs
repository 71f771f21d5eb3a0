//! Adversarial, deviation and perceptual objective terms as tape scalars.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::perceptual::FeatureStack;
use crate::tape::{Tape, Var};

/// Probabilities are clamped into `[LOG_EPS, 1 - LOG_EPS]` before taking logs.
pub const LOG_EPS: f32 = 1e-8;

/// Normalization of the L1 deviation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L1Norm {
    /// Mean absolute difference.
    Mean,
    /// Plain sum of absolute differences.
    Sum,
}

impl L1Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            L1Norm::Mean => "mean",
            L1Norm::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(L1Norm::Mean),
            "sum" => Ok(L1Norm::Sum),
            _ => Err(Error::Config(format!("unknown l1 normalization {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_dev: f32,
    pub w_cont: f32,
    pub w_sty: f32,
    pub w_tv: f32,
    /// Per-block Gram weight, keyed by 1-based block index.
    pub block_weights: BTreeMap<usize, f32>,
    pub l1_norm: L1Norm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dev: 100.0,
            w_cont: 1.0,
            w_sty: 10.0,
            w_tv: 100.0,
            block_weights: (1..=5).map(|b| (b, 0.2)).collect(),
            l1_norm: L1Norm::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_dev, self.w_cont, self.w_sty, self.w_tv]
            .into_iter()
            .chain(self.block_weights.values().copied());
        for w in all {
            if w.is_nan() || w < 0.0 {
                return Err(Error::Config(format!("loss weights must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// L1 deviation between the real image and the phantom.
pub fn dev_loss(tape: &mut Tape, x: Var, x_hat: Var, norm: L1Norm) -> Result<Var> {
    let d = tape
        .sub(x, x_hat)
        .map_err(|_| Error::shape("dev_loss", format!("{:?} vs {:?}", tape.shape(x), tape.shape(x_hat))))?;
    let a = tape.abs(d);
    Ok(match norm {
        L1Norm::Mean => tape.mean(a),
        L1Norm::Sum => tape.sum(a),
    })
}

/// Non-saturating generator term `−ln D(G(y, z), y)`.
pub fn generator_gan_loss(tape: &mut Tape, d_fake: Var) -> Var {
    let l = tape.clamped_log(d_fake, LOG_EPS, 1.0 - LOG_EPS);
    let s = tape.sum(l);
    tape.scale(s, -1.0)
}

/// Discriminator objective `ln D(x, y) + ln(1 − D(G(y, z), y))`, to be maximized.
pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Var {
    let lr = tape.clamped_log(d_real, LOG_EPS, 1.0 - LOG_EPS);
    let one_minus = tape.scale_shift(d_fake, -1.0, 1.0);
    let lf = tape.clamped_log(one_minus, LOG_EPS, 1.0 - LOG_EPS);
    let s = tape.add(lr, lf).expect("scalar probabilities");
    tape.sum(s)
}

#[derive(Debug, Clone, Copy)]
pub struct GanTerms {
    pub total: Var,
    pub gan: Var,
    pub dev: Var,
}

/// `−ln D(x̂) + λ·L_dev(x, x̂)`.
pub fn generator_total_loss_gan(tape: &mut Tape, d_fake: Var, x: Var, x_hat: Var, w: &LossWeights) -> Result<GanTerms> {
    let gan = generator_gan_loss(tape, d_fake);
    let dev = dev_loss(tape, x, x_hat, w.l1_norm)?;
    let weighted = tape.scale(dev, w.lambda_dev);
    let total = tape.add(gan, weighted)?;
    Ok(GanTerms { total, gan, dev })
}

/// Gram matrix of one `[C, H, W]` feature layer.
pub fn gram(tape: &mut Tape, features: Var) -> Result<Var> {
    tape.gram(features)
}

fn spatial(tape: &Tape, v: Var) -> Result<f32> {
    match tape.shape(v) {
        &[_, h, w] => Ok((h * w) as f32),
        s => Err(Error::shape("perceptual loss", format!("expected [C,H,W] features, got {s:?}"))),
    }
}

fn check_same_selection(a: &FeatureStack, b: &FeatureStack, op: &'static str) -> Result<()> {
    if a.maps.is_empty() || !a.maps.keys().eq(b.maps.keys()) {
        return Err(Error::shape(
            op,
            format!(
                "selections differ: {:?} vs {:?}",
                a.maps.keys().collect::<Vec<_>>(),
                b.maps.keys().collect::<Vec<_>>()
            ),
        ));
    }
    Ok(())
}

fn accumulate(tape: &mut Tape, total: Option<Var>, term: Var) -> Result<Var> {
    match total {
        None => Ok(term),
        Some(t) => tape.add(t, term),
    }
}

/// `Σ ϖ_b / (W_b·H_b) · ‖G(x_s) − G(x̂)‖_F²` over the selected layers; `W_b·H_b`
/// is the spatial size of the feature layer.
pub fn style_loss(tape: &mut Tape, feat_style: &FeatureStack, feat_hat: &FeatureStack, w: &LossWeights) -> Result<Var> {
    check_same_selection(feat_style, feat_hat, "style_loss")?;
    let mut total = None;
    for (&(block, layer), &fs) in &feat_style.maps {
        let fh = feat_hat.maps[&(block, layer)];
        let weight = *w
            .block_weights
            .get(&block)
            .ok_or_else(|| Error::InvalidArgument(format!("no Gram weight for block {block}")))?;
        let hw = spatial(tape, fs)?;
        let gs = tape.gram(fs)?;
        let gh = tape.gram(fh)?;
        let d = tape.sub(gs, gh)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        let term = tape.scale(s, weight / hw);
        total = Some(accumulate(tape, total, term)?);
    }
    Ok(total.expect("non-empty selection"))
}

/// `Σ 1 / (W_b·H_b) · ‖φ(x) − φ(x̂)‖_F²` over the selected layers.
pub fn content_loss(tape: &mut Tape, feat_x: &FeatureStack, feat_hat: &FeatureStack) -> Result<Var> {
    check_same_selection(feat_x, feat_hat, "content_loss")?;
    let mut total = None;
    for (id, &fx) in &feat_x.maps {
        let fh = feat_hat.maps[id];
        let hw = spatial(tape, fx)?;
        let d = tape.sub(fx, fh)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        let term = tape.scale(s, 1.0 / hw);
        total = Some(accumulate(tape, total, term)?);
    }
    Ok(total.expect("non-empty selection"))
}

/// Squared-difference total variation summed over channels.
pub fn tv_loss(tape: &mut Tape, x_hat: Var) -> Result<Var> {
    tape.total_variation(x_hat)
}

#[derive(Debug, Clone, Copy)]
pub struct StyleTerms {
    pub total: Var,
    pub style: Var,
    pub content: Var,
    pub tv: Var,
}

/// `w_cont·l_cont + w_sty·l_sty + w_tv·l_tv` from precomputed feature stacks.
pub fn style_transfer_loss(
    tape: &mut Tape,
    feat_x: &FeatureStack,
    feat_style: &FeatureStack,
    hat_content: &FeatureStack,
    hat_style: &FeatureStack,
    x_hat: Var,
    w: &LossWeights,
) -> Result<StyleTerms> {
    let style = style_loss(tape, feat_style, hat_style, w)?;
    let content = content_loss(tape, feat_x, hat_content)?;
    let tv = tv_loss(tape, x_hat)?;
    let a = tape.scale(content, w.w_cont);
    let b = tape.scale(style, w.w_sty);
    let c = tape.scale(tv, w.w_tv);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(StyleTerms { total, style, content, tv })
}

#[derive(Debug, Clone, Copy)]
pub struct StyleGanTerms {
    pub total: Var,
    pub gan: Var,
    pub st: StyleTerms,
}

/// `−ln D(x̂) + L_ST`.
pub fn generator_total_loss_style(tape: &mut Tape, d_fake: Var, st: StyleTerms) -> Result<StyleGanTerms> {
    let gan = generator_gan_loss(tape, d_fake);
    let total = tape.add(gan, st.total)?;
    Ok(StyleGanTerms { total, gan, st })
}
