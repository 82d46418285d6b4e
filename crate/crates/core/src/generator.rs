//! Image generator. A coarse per-class seed is repeatedly upsampled through
//! residual convolution blocks; each resolution injects style through
//! cross-attention (or a mask-modulated normalization in the ablated mode)
//! and, up to a cutoff resolution, refines features with self-attention.

use rand::Rng;

use crate::attention::{CrossAttentionBlock, SelfAttentionBlock};
use crate::error::{Error, Result};
use crate::mask::{masks_to_batch, SemanticMask};
use crate::nn::{Conv2d, Forward, GroupNorm, Linear, Param, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// How style reaches the feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Cross-attention from features to per-class style rows.
    CrossAttention,
    /// Ablation: spatially broadcast per-class modulation (no attention).
    MaskModulation,
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub style_width: usize,
    /// Side length of the seed the first block upsamples from.
    pub base_resolution: usize,
    /// Output channel width of each upsampling block, coarsest first.
    pub block_widths: Vec<usize>,
    /// Self-attention runs only at resolutions up to this side length.
    pub self_attention_cutoff: usize,
    pub conditioning: ConditioningMode,
    /// When false the seed is the downsampled mask itself (embedder ablation).
    pub embedded_seed: bool,
}

impl GeneratorConfig {
    /// Full-scale configuration: 256 x 256 output from an 8 x 8 seed,
    /// self-attention at 16, 32 and 64.
    pub fn full(num_classes: usize, style_width: usize) -> Self {
        GeneratorConfig {
            num_classes,
            style_width,
            base_resolution: 8,
            block_widths: vec![256, 128, 64, 32, 16],
            self_attention_cutoff: 64,
            conditioning: ConditioningMode::CrossAttention,
            embedded_seed: true,
        }
    }

    pub fn output_resolution(&self) -> usize {
        self.base_resolution << self.block_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.style_width == 0 {
            return Err(Error::Config("generator: classes and style width must be positive".into()));
        }
        if self.base_resolution == 0 || !self.base_resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "generator: base_resolution {} must be a power of two",
                self.base_resolution
            )));
        }
        if self.block_widths.is_empty() || self.block_widths.contains(&0) {
            return Err(Error::Config("generator: block_widths must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Pre-activation residual block with a 1x1 shortcut on width changes.
#[derive(Debug, Clone)]
struct ResBlock<E: Scalar> {
    norm1: GroupNorm<E>,
    conv1: Conv2d<E>,
    norm2: GroupNorm<E>,
    conv2: Conv2d<E>,
    shortcut: Option<Conv2d<E>>,
}

fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl<E: Scalar> ResBlock<E> {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            norm1: GroupNorm::new(&format!("{name}.norm1"), cin, norm_groups(cin)),
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, 1, 1, 1, rng),
            norm2: GroupNorm::new(&format!("{name}.norm2"), cout, norm_groups(cout)),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, 1, rng),
            shortcut: (cin != cout)
                .then(|| Conv2d::new(&format!("{name}.shortcut"), cin, cout, 1, 1, 0, 1, rng)),
        }
    }

    fn forward(&self, ctx: &Forward<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let slope = E::from_f64(LEAKY_SLOPE);
        let y = self.norm1.forward(ctx, x)?.leaky_relu(slope);
        let y = self.conv1.forward(ctx, &y)?;
        let y = self.norm2.forward(ctx, &y)?.leaky_relu(slope);
        let y = self.conv2.forward(ctx, &y)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(ctx, x)?,
            None => x.clone(),
        };
        y.add(&skip)
    }
}

impl<E: Scalar> ParamSet<E> for ResBlock<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.norm1.visit(f);
        self.conv1.visit(f);
        self.norm2.visit(f);
        self.conv2.visit(f);
        if let Some(s) = &self.shortcut {
            s.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.norm1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.norm2.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(f);
        }
    }
}

/// Ablation conditioning: per-class scale and shift rows broadcast over the
/// pixels of each class via the mask.
#[derive(Debug, Clone)]
struct MaskModulation<E: Scalar> {
    scale: Linear<E>,
    shift: Linear<E>,
}

impl<E: Scalar> MaskModulation<E> {
    fn new(name: &str, style_width: usize, width: usize, _rng: &mut impl Rng) -> Self {
        MaskModulation {
            // zero-init keeps the block an identity at initialization
            scale: Linear::new_zeroed(&format!("{name}.scale"), style_width, width),
            shift: Linear::new_zeroed(&format!("{name}.shift"), style_width, width),
        }
    }

    fn forward(
        &self,
        ctx: &Forward<E>,
        x: &Tensor<E>,
        styles: &Tensor<E>,
        masks: &[&SemanticMask],
    ) -> Result<Tensor<E>> {
        let s = x.shape().to_vec();
        let (n, cw, h, w) = (s[0], s[1], s[2], s[3]);
        let c = masks[0].num_classes();
        let resized: Vec<SemanticMask> = masks.iter().map(|m| m.resize(h, w)).collect();
        let mask = masks_to_batch(&ctx.graph, &resized.iter().collect::<Vec<_>>())
            .reshape(&[n, c, h * w])?;
        let gamma = broadcast_class_rows(&self.scale.forward(ctx, styles)?, &mask, n, cw, h, w)?;
        let beta = broadcast_class_rows(&self.shift.forward(ctx, styles)?, &mask, n, cw, h, w)?;
        x.mul(&gamma.add_scalar(E::one()))?.add(&beta)
    }
}

impl<E: Scalar> ParamSet<E> for MaskModulation<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.scale.visit(f);
        self.shift.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.scale.visit_mut(f);
        self.shift.visit_mut(f);
    }
}

/// Broadcast per-class rows [N, C, W] over pixels via a one-hot mask
/// [N, C, HW]: pixel p of the result carries the row of p's class.
pub fn broadcast_class_rows<E: Scalar>(
    rows: &Tensor<E>,
    mask: &Tensor<E>,
    n: usize,
    cw: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<E>> {
    // [N, W, C] x [N, C, HW] -> [N, W, HW]
    rows.permute(&[0, 2, 1])?.bmm(mask)?.reshape(&[n, cw, h, w])
}

enum Conditioning<E: Scalar> {
    Cross(CrossAttentionBlock<E>),
    Modulate(MaskModulation<E>),
}

struct GenBlock<E: Scalar> {
    res: ResBlock<E>,
    self_attn: Option<SelfAttentionBlock<E>>,
    cond: Conditioning<E>,
}

/// A generated batch: images in [-1, 1] plus the per-resolution
/// cross-attention maps (empty in the modulation ablation).
pub struct GeneratedSample<E: Scalar> {
    pub image: Tensor<E>,
    /// Coarsest first; each entry is [N, heads, C, H, W].
    pub attention_stack: Vec<Tensor<E>>,
}

pub struct Generator<E: Scalar> {
    pub cfg: GeneratorConfig,
    lift: Conv2d<E>,
    blocks: Vec<GenBlock<E>>,
    final_norm: GroupNorm<E>,
    final_conv: Conv2d<E>,
}

impl<E: Scalar> Generator<E> {
    pub fn new(cfg: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.num_classes;
        let lift = Conv2d::new("generator.lift", c, cfg.block_widths[0], 1, 1, 0, 1, rng);
        let mut blocks = Vec::with_capacity(cfg.block_widths.len());
        let mut res = cfg.base_resolution;
        for (i, &width) in cfg.block_widths.iter().enumerate() {
            res *= 2;
            let cin = if i == 0 { cfg.block_widths[0] } else { cfg.block_widths[i - 1] };
            let name = format!("generator.block{i}");
            let self_attn = (res <= cfg.self_attention_cutoff)
                .then(|| SelfAttentionBlock::new(&format!("{name}.self_attn"), width, rng))
                .transpose()?;
            let cond = match cfg.conditioning {
                ConditioningMode::CrossAttention => Conditioning::Cross(CrossAttentionBlock::new(
                    &format!("{name}.cross_attn"),
                    width,
                    cfg.style_width,
                    rng,
                )?),
                ConditioningMode::MaskModulation => Conditioning::Modulate(MaskModulation::new(
                    &format!("{name}.modulation"),
                    cfg.style_width,
                    width,
                    rng,
                )),
            };
            blocks.push(GenBlock {
                res: ResBlock::new(&format!("{name}.res"), cin, width, rng),
                self_attn,
                cond,
            });
        }
        let last = *cfg.block_widths.last().unwrap();
        Ok(Generator {
            final_norm: GroupNorm::new("generator.final_norm", last, norm_groups(last)),
            final_conv: Conv2d::new("generator.final_conv", last, 3, 3, 1, 1, 1, rng),
            cfg,
            lift,
            blocks,
        })
    }

    /// Build the [N, C, base, base] seed, either from the mask embedding
    /// (resampled from its 16 x 16 view) or from the mask itself.
    pub fn seed(
        &self,
        ctx: &Forward<E>,
        masks: &[&SemanticMask],
        embedding: Option<&Tensor<E>>,
    ) -> Result<Tensor<E>> {
        if self.cfg.embedded_seed {
            let e = embedding.ok_or_else(|| {
                Error::Config("generator: embedded_seed config requires a mask embedding".into())
            })?;
            let mut cur = e.clone();
            while cur.shape()[2] > self.cfg.base_resolution {
                cur = cur.avgpool2x()?;
            }
            while cur.shape()[2] < self.cfg.base_resolution {
                cur = cur.upsample2x()?;
            }
            Ok(cur)
        } else {
            let b = self.cfg.base_resolution;
            let resized: Vec<SemanticMask> = masks.iter().map(|m| m.resize(b, b)).collect();
            Ok(masks_to_batch(&ctx.graph, &resized.iter().collect::<Vec<_>>()))
        }
    }

    /// `styles` is [N, C, style_width]; `embedding` is [N, C, 16, 16] when
    /// the embedded seed is enabled.
    pub fn forward(
        &self,
        ctx: &Forward<E>,
        masks: &[&SemanticMask],
        styles: &Tensor<E>,
        embedding: Option<&Tensor<E>>,
    ) -> Result<GeneratedSample<E>> {
        let ss = styles.shape().to_vec();
        if ss.len() != 3
            || ss[0] != masks.len()
            || ss[1] != self.cfg.num_classes
            || ss[2] != self.cfg.style_width
        {
            return Err(Error::Dim(format!(
                "generator: styles must be [{}, {}, {}], got {:?}",
                masks.len(),
                self.cfg.num_classes,
                self.cfg.style_width,
                ss
            )));
        }
        let seed = self.seed(ctx, masks, embedding)?;
        let mut x = self.lift.forward(ctx, &seed)?;
        let mut attention_stack = Vec::new();
        for block in &self.blocks {
            x = x.upsample2x()?;
            x = block.res.forward(ctx, &x)?;
            if let Some(sa) = &block.self_attn {
                x = sa.forward(ctx, &x)?;
            }
            match &block.cond {
                Conditioning::Cross(ca) => {
                    let out = ca.forward(ctx, &x, styles)?;
                    x = out.features;
                    attention_stack.push(out.maps);
                }
                Conditioning::Modulate(m) => {
                    x = m.forward(ctx, &x, styles, masks)?;
                }
            }
        }
        let slope = E::from_f64(LEAKY_SLOPE);
        let y = self.final_norm.forward(ctx, &x)?.leaky_relu(slope);
        let image = self.final_conv.forward(ctx, &y)?.tanh();
        Ok(GeneratedSample {
            image,
            attention_stack,
        })
    }
}

impl<E: Scalar> ParamSet<E> for Generator<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.lift.visit(f);
        for b in &self.blocks {
            b.res.visit(f);
            if let Some(sa) = &b.self_attn {
                sa.visit(f);
            }
            match &b.cond {
                Conditioning::Cross(ca) => ca.visit(f),
                Conditioning::Modulate(m) => m.visit(f),
            }
        }
        self.final_norm.visit(f);
        self.final_conv.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.lift.visit_mut(f);
        for b in &mut self.blocks {
            b.res.visit_mut(f);
            if let Some(sa) = &mut b.self_attn {
                sa.visit_mut(f);
            }
            match &mut b.cond {
                Conditioning::Cross(ca) => ca.visit_mut(f),
                Conditioning::Modulate(m) => m.visit_mut(f),
            }
        }
        self.final_norm.visit_mut(f);
        self.final_conv.visit_mut(f);
    }
}
