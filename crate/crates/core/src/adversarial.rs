//! Multi-scale patch discriminator and the training loss suite: hinge
//! adversarial losses, feature matching, a frozen random-feature perceptual
//! proxy, and the attention loss that ties cross-attention maps to the mask.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{masks_to_batch, SemanticMask};
use crate::nn::{Conv2d, Forward, GroupNorm, Param, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const BCE_EPS: f64 = 1e-7;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct DiscriminatorConfig {
    pub num_classes: usize,
    pub num_scales: usize,
    pub base_width: usize,
    /// Stride-2 layers per patch discriminator before the scoring conv.
    pub num_layers: usize,
}

impl DiscriminatorConfig {
    pub fn new(num_classes: usize) -> Self {
        DiscriminatorConfig {
            num_classes,
            num_scales: 2,
            base_width: 32,
            num_layers: 3,
        }
    }

    /// Spatial side of the score map for an input of side `r`.
    pub fn score_side(&self, r: usize) -> usize {
        let mut s = r;
        for _ in 0..self.num_layers {
            s = (s + 2 - 4) / 2 + 1; // stride-2, k=4, pad=1
        }
        s.saturating_sub(3) // final k=4, s=1, pad=0
    }
}

struct PatchLayer<E: Scalar> {
    conv: Conv2d<E>,
    norm: Option<GroupNorm<E>>,
}

/// One stride-2 conv stack ending in a 1-channel score map.
struct PatchDiscriminator<E: Scalar> {
    layers: Vec<PatchLayer<E>>,
    score: Conv2d<E>,
}

impl<E: Scalar> PatchDiscriminator<E> {
    fn new(name: &str, cfg: &DiscriminatorConfig, rng: &mut impl Rng) -> Self {
        let cin0 = 3 + cfg.num_classes;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut cin = cin0;
        for i in 0..cfg.num_layers {
            let cout = cfg.base_width << i.min(3);
            let conv = Conv2d::new(&format!("{name}.layer{i}.conv"), cin, cout, 4, 2, 1, 1, rng);
            // first layer runs without normalization, as is conventional
            let norm = (i > 0).then(|| {
                GroupNorm::new(&format!("{name}.layer{i}.norm"), cout, norm_groups(cout))
            });
            layers.push(PatchLayer { conv, norm });
            cin = cout;
        }
        PatchDiscriminator {
            layers,
            score: Conv2d::new(&format!("{name}.score"), cin, 1, 4, 1, 0, 1, rng),
        }
    }

    fn forward(&self, ctx: &Forward<E>, x: &Tensor<E>) -> Result<ScaleOutput<E>> {
        let slope = E::from_f64(LEAKY_SLOPE);
        let mut features = Vec::with_capacity(self.layers.len());
        let mut y = x.clone();
        for layer in &self.layers {
            y = layer.conv.forward(ctx, &y)?;
            if let Some(n) = &layer.norm {
                y = n.forward(ctx, &y)?;
            }
            y = y.leaky_relu(slope);
            features.push(y.clone());
        }
        let score = self.score.forward(ctx, &y)?;
        Ok(ScaleOutput { score, features })
    }
}

impl<E: Scalar> ParamSet<E> for PatchDiscriminator<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        for l in &self.layers {
            l.conv.visit(f);
            if let Some(n) = &l.norm {
                n.visit(f);
            }
        }
        self.score.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        for l in &mut self.layers {
            l.conv.visit_mut(f);
            if let Some(n) = &mut l.norm {
                n.visit_mut(f);
            }
        }
        self.score.visit_mut(f);
    }
}

fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// One discriminator scale: final score map plus intermediate features.
pub struct ScaleOutput<E: Scalar> {
    pub score: Tensor<E>,
    pub features: Vec<Tensor<E>>,
}

pub struct DiscriminatorOutputs<E: Scalar> {
    pub scales: Vec<ScaleOutput<E>>,
}

pub struct Discriminator<E: Scalar> {
    pub cfg: DiscriminatorConfig,
    branches: Vec<PatchDiscriminator<E>>,
}

impl<E: Scalar> Discriminator<E> {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut impl Rng) -> Self {
        let branches = (0..cfg.num_scales)
            .map(|s| PatchDiscriminator::new(&format!("discriminator.scale{s}"), &cfg, rng))
            .collect();
        Discriminator { cfg, branches }
    }

    /// `image` is [N, 3, H, W] in [-1, 1]; the mask channels are
    /// concatenated and each scale sees a further 2x downsampled input.
    pub fn forward(
        &self,
        ctx: &Forward<E>,
        image: &Tensor<E>,
        masks: &[&SemanticMask],
    ) -> Result<DiscriminatorOutputs<E>> {
        let s = image.shape().to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Dim(format!(
                "discriminator: expected [N, 3, H, W] image, got {s:?}"
            )));
        }
        if masks.len() != s[0]
            || masks[0].height() != s[2]
            || masks[0].width() != s[3]
            || masks[0].num_classes() != self.cfg.num_classes
        {
            return Err(Error::Dim(format!(
                "discriminator: masks do not match image batch {s:?}"
            )));
        }
        let mask = masks_to_batch(&ctx.graph, masks);
        let mut x = crate::tensor::concat(&[image, &mask], 1)?;
        let mut scales = Vec::with_capacity(self.branches.len());
        for (i, branch) in self.branches.iter().enumerate() {
            if i > 0 {
                x = x.avgpool2x()?;
            }
            scales.push(branch.forward(ctx, &x)?);
        }
        Ok(DiscriminatorOutputs { scales })
    }

    /// Run one scale's branch directly on a pre-concatenated
    /// [N, 3 + C, H, W] input (compositionality checks).
    pub fn branch_forward(
        &self,
        ctx: &Forward<E>,
        scale: usize,
        x: &Tensor<E>,
    ) -> Result<ScaleOutput<E>> {
        self.branches[scale].forward(ctx, x)
    }
}

impl<E: Scalar> ParamSet<E> for Discriminator<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        for b in &self.branches {
            b.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        for b in &mut self.branches {
            b.visit_mut(f);
        }
    }
}

/// Hinge losses: discriminator side `mean(max(0, 1-real)) + mean(max(0, 1+fake))`,
/// generator side `-mean(fake)`, each averaged over scales.
pub fn hinge_losses<E: Scalar>(
    real: &DiscriminatorOutputs<E>,
    fake: &DiscriminatorOutputs<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    if real.scales.len() != fake.scales.len() {
        return Err(Error::Dim(format!(
            "hinge: scale counts differ, {} vs {}",
            real.scales.len(),
            fake.scales.len()
        )));
    }
    let inv = E::from_f64(1.0 / real.scales.len() as f64);
    let mut adv_d: Option<Tensor<E>> = None;
    let mut adv_g: Option<Tensor<E>> = None;
    for (r, f) in real.scales.iter().zip(&fake.scales) {
        let d_real = r.score.scale(-E::one()).add_scalar(E::one()).relu().mean_all();
        let d_fake = f.score.add_scalar(E::one()).relu().mean_all();
        let d = d_real.add(&d_fake)?;
        let g = f.score.mean_all().scale(-E::one());
        adv_d = Some(match adv_d {
            Some(t) => t.add(&d)?,
            None => d,
        });
        adv_g = Some(match adv_g {
            Some(t) => t.add(&g)?,
            None => g,
        });
    }
    Ok((adv_d.unwrap().scale(inv), adv_g.unwrap().scale(inv)))
}

/// Mean L1 across all corresponding intermediate features and scales.
pub fn feature_matching_loss<E: Scalar>(
    real: &DiscriminatorOutputs<E>,
    fake: &DiscriminatorOutputs<E>,
) -> Result<Tensor<E>> {
    if real.scales.len() != fake.scales.len() {
        return Err(Error::Dim("feature matching: scale counts differ".into()));
    }
    let mut total: Option<Tensor<E>> = None;
    let mut count = 0usize;
    for (r, f) in real.scales.iter().zip(&fake.scales) {
        if r.features.len() != f.features.len() {
            return Err(Error::Dim("feature matching: feature counts differ".into()));
        }
        for (a, b) in r.features.iter().zip(&f.features) {
            if a.shape() != b.shape() {
                return Err(Error::Dim(format!(
                    "feature matching: shapes {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let l = a.sub(b)?.abs().mean_all();
            total = Some(match total {
                Some(t) => t.add(&l)?,
                None => l,
            });
            count += 1;
        }
    }
    let total = total.ok_or_else(|| Error::Dim("feature matching: no features".into()))?;
    Ok(total.scale(E::from_f64(1.0 / count as f64)))
}

/// Frozen, randomly initialized conv pyramid used as a perceptual proxy and
/// as the feature extractor for the Frechet-style metric. The seed is part
/// of the model state and is persisted in checkpoints.
pub struct FeaturePyramid<E: Scalar> {
    pub seed: u64,
    convs: Vec<Conv2d<E>>,
}

pub const PYRAMID_WIDTHS: [usize; 3] = [16, 32, 64];

impl<E: Scalar> FeaturePyramid<E> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &w) in PYRAMID_WIDTHS.iter().enumerate() {
            convs.push(Conv2d::new(
                &format!("pyramid.conv{i}"),
                cin,
                w,
                3,
                2,
                1,
                1,
                &mut rng,
            ));
            cin = w;
        }
        FeaturePyramid { seed, convs }
    }

    /// Layer activations for an [N, 3, H, W] image.
    pub fn features(&self, ctx: &Forward<E>, image: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        let frozen = ctx.view(false);
        let slope = E::from_f64(LEAKY_SLOPE);
        let mut out = Vec::with_capacity(self.convs.len());
        let mut y = image.clone();
        for conv in &self.convs {
            y = conv.forward(&frozen, &y)?.leaky_relu(slope);
            out.push(y.clone());
        }
        Ok(out)
    }

    /// Per-image descriptor: spatial mean of the deepest layer, [N, D].
    pub fn descriptor(&self, ctx: &Forward<E>, image: &Tensor<E>) -> Result<Tensor<E>> {
        let feats = self.features(ctx, image)?;
        let last = feats.last().unwrap();
        let s = last.shape().to_vec();
        let hw = E::from_f64((s[2] * s[3]) as f64);
        Ok(last.sum_spatial()?.scale(E::one() / hw))
    }

    pub fn descriptor_dim(&self) -> usize {
        *PYRAMID_WIDTHS.last().unwrap()
    }
}

/// Mean L1 between frozen pyramid features of two images.
pub fn perceptual_loss<E: Scalar>(
    pyramid: &FeaturePyramid<E>,
    ctx: &Forward<E>,
    a: &Tensor<E>,
    b: &Tensor<E>,
) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "perceptual loss: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let fa = pyramid.features(ctx, a)?;
    let fb = pyramid.features(ctx, b)?;
    let inv = E::from_f64(1.0 / fa.len() as f64);
    let mut total: Option<Tensor<E>> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let l = x.sub(y)?.abs().mean_all();
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    Ok(total.unwrap().scale(inv))
}

/// Binary cross-entropy between each cross-attention map and the mask
/// channel of its class, averaged uniformly over heads, classes, pixels and
/// layers. `stack` entries are [N, heads, C, H, W] row-stochastic maps.
pub fn attention_loss<E: Scalar>(
    stack: &[Tensor<E>],
    masks: &[&SemanticMask],
) -> Result<Tensor<E>> {
    if stack.is_empty() {
        return Err(Error::Dim("attention loss: empty map stack".into()));
    }
    let lo = E::from_f64(BCE_EPS);
    let hi = E::from_f64(1.0 - BCE_EPS);
    let inv_layers = E::from_f64(1.0 / stack.len() as f64);
    let mut total: Option<Tensor<E>> = None;
    for maps in stack {
        let s = maps.shape().to_vec();
        if s.len() != 5 || s[0] != masks.len() || s[2] != masks[0].num_classes() {
            return Err(Error::Dim(format!(
                "attention loss: maps [N, h, C, H, W] expected with N={} C={}, got {s:?}",
                masks.len(),
                masks[0].num_classes()
            )));
        }
        let (n, h, c, mh, mw) = (s[0], s[1], s[2], s[3], s[4]);
        // binary target: the mask channel, replicated over heads
        let mut target = Vec::with_capacity(n * h * c * mh * mw);
        for m in masks {
            let r = m.resize(mh, mw);
            for _ in 0..h {
                target.extend(r.data().iter().map(|&v| E::from_f32(v)));
            }
        }
        let y = maps.graph().constant(target, &s);
        let x = maps.clamp(lo, hi);
        let one_minus_x = x.scale(-E::one()).add_scalar(E::one());
        let one_minus_y = y.scale(-E::one()).add_scalar(E::one());
        let ll = y.mul(&x.log())?.add(&one_minus_y.mul(&one_minus_x.log())?)?;
        let layer_loss = ll.mean_all().scale(-E::one());
        total = Some(match total {
            Some(t) => t.add(&layer_loss)?,
            None => layer_loss,
        });
    }
    Ok(total.unwrap().scale(inv_layers))
}

/// Generator-side loss weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub feat_match: f64,
    pub perceptual: f64,
    pub attention: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            feat_match: 10.0,
            perceptual: 10.0,
            attention: 1.0,
        }
    }
}

/// Scalar record of every loss term for one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBundle {
    pub adv_g: f64,
    pub adv_d: f64,
    pub feat_match: f64,
    pub perceptual: f64,
    pub attention: Option<f64>,
    pub weighted_total: f64,
    pub weights: LossWeights,
}

/// Weighted generator total; the attention term is omitted when its maps
/// are absent (modulation ablation) or its weight is zero.
pub fn generator_total<E: Scalar>(
    adv_g: &Tensor<E>,
    feat_match: &Tensor<E>,
    perceptual: &Tensor<E>,
    attention: Option<&Tensor<E>>,
    w: &LossWeights,
) -> Result<Tensor<E>> {
    let mut total = adv_g
        .add(&feat_match.scale(E::from_f64(w.feat_match)))?
        .add(&perceptual.scale(E::from_f64(w.perceptual)))?;
    if let Some(att) = attention {
        if w.attention != 0.0 {
            total = total.add(&att.scale(E::from_f64(w.attention)))?;
        }
    }
    Ok(total)
}
