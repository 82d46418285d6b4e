//! Multi-resolution grouped style encoder.
//!
//! A U-shaped network with one convolution group per semantic class. At each
//! up-sampling layer the mask is resized, features are average-pooled per
//! class under the mask, projected to `code_dim` by a grouped 1x1
//! convolution, and the per-resolution codes are concatenated
//! (coarsest resolution first) into a C x S style matrix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mask::SemanticMask;
use crate::nn::{Conv2d, Forward, GroupNorm, Linear, Param, ParamSet};
use crate::tensor::{concat, Graph, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub num_classes: usize,
    pub filters_per_group: usize,
    pub down_layers: usize,
    pub up_layers: usize,
    pub code_dim: usize,
    /// Grouped convolutions (the full model) vs plain convolutions
    /// (the "without grouped convolutions" ablation arm).
    pub grouped: bool,
    /// When false, the RGB stem replicates the input per class and uses a
    /// grouped convolution, so no cross-class channel mixing occurs anywhere.
    pub input_mixing: bool,
}

impl EncoderConfig {
    /// Full-scale configuration: style codes `num_classes x 1280`.
    pub fn full_scale(num_classes: usize) -> Self {
        EncoderConfig {
            num_classes,
            filters_per_group: 4,
            down_layers: 6,
            up_layers: 5,
            code_dim: 256,
            grouped: true,
            input_mixing: true,
        }
    }

    /// Total width of one class's style code.
    pub fn style_width(&self) -> usize {
        self.up_layers * self.code_dim
    }

    fn trunk_width(&self) -> usize {
        self.num_classes * self.filters_per_group
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 1 || self.up_layers < 1 || self.code_dim < 1 {
            return Err(Error::Config(
                "encoder: num_classes, up_layers and code_dim must be >= 1".into(),
            ));
        }
        if self.down_layers < self.up_layers + 1 {
            return Err(Error::Config(format!(
                "encoder: down_layers {} must exceed up_layers {} (skip pairing)",
                self.down_layers, self.up_layers
            )));
        }
        Ok(())
    }
}

/// Per-class multi-resolution style codes, C x S with S = up_layers * code_dim.
#[derive(Debug, Clone)]
pub struct StyleCodes<E: Scalar> {
    pub values: Vec<E>,
    pub num_classes: usize,
    pub width: usize,
}

impl<E: Scalar> StyleCodes<E> {
    pub fn new(values: Vec<E>, num_classes: usize, width: usize) -> Result<Self> {
        if values.len() != num_classes * width {
            return Err(Error::Dim(format!(
                "style codes length {} != {num_classes}x{width}",
                values.len()
            )));
        }
        Ok(StyleCodes {
            values,
            num_classes,
            width,
        })
    }

    pub fn row(&self, j: usize) -> &[E] {
        &self.values[j * self.width..(j + 1) * self.width]
    }

    /// Replace row `j` with another code's row `j`.
    pub fn replace_row(&mut self, j: usize, other: &StyleCodes<E>) {
        assert_eq!(self.width, other.width);
        self.values[j * self.width..(j + 1) * self.width].copy_from_slice(other.row(j));
    }

    pub fn to_tensor(&self, g: &Graph<E>) -> Tensor<E> {
        g.constant(self.values.clone(), &[1, self.num_classes, self.width])
    }
}

struct Stage<E: Scalar> {
    conv: Conv2d<E>,
    norm: GroupNorm<E>,
}

enum Projection<E: Scalar> {
    /// Grouped 1x1 convolution, one group per class (no class mixing).
    Grouped(Conv2d<E>),
    /// Shared linear CF -> code_dim applied per class (ungrouped arm).
    Shared(Linear<E>),
}

/// The grouped multi-resolution style encoder.
pub struct StyleEncoder<E: Scalar> {
    pub cfg: EncoderConfig,
    stem: Conv2d<E>,
    stem_norm: GroupNorm<E>,
    downs: Vec<Stage<E>>,
    ups: Vec<Stage<E>>,
    projections: Vec<Projection<E>>,
}

impl<E: Scalar> StyleEncoder<E> {
    pub fn new(cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.num_classes;
        let cf = cfg.trunk_width();
        let groups = if cfg.grouped { c } else { 1 };
        let norm_groups = c; // per-class statistics regardless of conv grouping
        let stem = if cfg.input_mixing {
            Conv2d::new("style_encoder.stem", 3, cf, 3, 1, 1, 1, rng)
        } else {
            // input replicated per class, convolved group-wise
            Conv2d::new("style_encoder.stem", 3 * c, cf, 3, 1, 1, c, rng)
        };
        let stem_norm = GroupNorm::new("style_encoder.stem_norm", cf, norm_groups);
        let downs = (0..cfg.down_layers)
            .map(|i| Stage {
                conv: Conv2d::new(
                    &format!("style_encoder.down{i}"),
                    cf,
                    cf,
                    3,
                    2,
                    1,
                    groups,
                    rng,
                ),
                norm: GroupNorm::new(&format!("style_encoder.down{i}_norm"), cf, norm_groups),
            })
            .collect();
        let ups = (0..cfg.up_layers)
            .map(|i| Stage {
                conv: Conv2d::new(
                    &format!("style_encoder.up{i}"),
                    2 * cf,
                    cf,
                    3,
                    1,
                    1,
                    groups,
                    rng,
                ),
                norm: GroupNorm::new(&format!("style_encoder.up{i}_norm"), cf, norm_groups),
            })
            .collect();
        let projections = (0..cfg.up_layers)
            .map(|i| {
                if cfg.grouped {
                    Projection::Grouped(Conv2d::new(
                        &format!("style_encoder.proj{i}"),
                        cf,
                        c * cfg.code_dim,
                        1,
                        1,
                        0,
                        c,
                        rng,
                    ))
                } else {
                    Projection::Shared(Linear::new(
                        &format!("style_encoder.proj{i}"),
                        cf,
                        cfg.code_dim,
                        rng,
                    ))
                }
            })
            .collect();
        Ok(StyleEncoder {
            cfg,
            stem,
            stem_norm,
            downs,
            ups,
            projections,
        })
    }

    /// Full forward pass: image [N,3,H,W] plus one mask per sample, yielding
    /// style codes [N, C, S].
    pub fn forward(
        &self,
        ctx: &Forward<E>,
        image: &Tensor<E>,
        masks: &[&SemanticMask],
    ) -> Result<Tensor<E>> {
        let cfg = &self.cfg;
        let shape = image.shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Dim(format!(
                "style encoder expects [N,3,H,W] image, got {shape:?}"
            )));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        if n != masks.len() {
            return Err(Error::Config(format!(
                "style encoder: {n} images but {} masks",
                masks.len()
            )));
        }
        for m in masks {
            if m.num_classes() != cfg.num_classes || m.height() != h || m.width() != w {
                return Err(Error::Config(format!(
                    "style encoder: mask {}x{}x{} does not match config C={} and image {h}x{w}",
                    m.num_classes(),
                    m.height(),
                    m.width(),
                    cfg.num_classes
                )));
            }
        }
        if h % (1 << cfg.down_layers) != 0 || w % (1 << cfg.down_layers) != 0 {
            return Err(Error::Config(format!(
                "style encoder: image {h}x{w} not divisible by 2^{}",
                cfg.down_layers
            )));
        }

        let x = if cfg.input_mixing {
            image.clone()
        } else {
            // replicate RGB once per class so the grouped stem sees its own copy
            let copies: Vec<Tensor<E>> = (0..cfg.num_classes).map(|_| image.clone()).collect();
            let refs: Vec<&Tensor<E>> = copies.iter().collect();
            concat(&refs, 1)?
        };
        let mut x = self
            .stem_norm
            .forward(ctx, &self.stem.forward(ctx, &x)?)?
            .relu();

        let mut skips = Vec::with_capacity(cfg.down_layers);
        for stage in &self.downs {
            x = stage.norm.forward(ctx, &stage.conv.forward(ctx, &x)?)?.relu();
            skips.push(x.clone());
        }

        let mut per_layer_codes = Vec::with_capacity(cfg.up_layers);
        for (i, stage) in self.ups.iter().enumerate() {
            x = x.upsample2x()?;
            // skip from the down stage at the same resolution
            let skip = &skips[cfg.down_layers - 2 - i];
            x = self.concat_groups(&x, skip)?;
            x = stage.norm.forward(ctx, &stage.conv.forward(ctx, &x)?)?.relu();
            per_layer_codes.push(self.pool_and_project(ctx, &x, masks, i)?);
        }
        let refs: Vec<&Tensor<E>> = per_layer_codes.iter().collect();
        concat(&refs, 2)
    }

    /// Channel-concatenate keeping per-class groups adjacent:
    /// [N, C*f, H, W] + [N, C*f, H, W] -> [N, C*2f, H, W] with group j
    /// holding (up_j, skip_j).
    fn concat_groups(&self, up: &Tensor<E>, skip: &Tensor<E>) -> Result<Tensor<E>> {
        let s = up.shape().to_vec();
        let (n, hh, ww) = (s[0], s[2], s[3]);
        let (c, f) = (self.cfg.num_classes, self.cfg.filters_per_group);
        let a = up.reshape(&[n, c, f, hh, ww])?;
        let b = skip.reshape(&[n, c, f, hh, ww])?;
        concat(&[&a, &b], 2)?.reshape(&[n, c * 2 * f, hh, ww])
    }

    /// Eq-style per-class masked pooling plus grouped 1x1 projection at one
    /// resolution, producing [N, C, code_dim].
    fn pool_and_project(
        &self,
        ctx: &Forward<E>,
        feats: &Tensor<E>,
        masks: &[&SemanticMask],
        layer: usize,
    ) -> Result<Tensor<E>> {
        let cfg = &self.cfg;
        let s = feats.shape().to_vec();
        let (n, cf, hh, ww) = (s[0], s[1], s[2], s[3]);
        let c = cfg.num_classes;
        let f = cf / c;
        let resized: Vec<SemanticMask> = masks.iter().map(|m| m.resize(hh, ww)).collect();

        if cfg.grouped {
            // expand each class's mask channel across its feature group
            let mut mdata = Vec::with_capacity(n * cf * hh * ww);
            let mut invcnt = Vec::with_capacity(n * cf);
            for rm in &resized {
                let counts = rm.class_counts();
                for j in 0..c {
                    let ch = rm.channel(j);
                    let inv = if counts[j] > 0 {
                        E::from_f64(1.0 / counts[j] as f64)
                    } else {
                        E::zero()
                    };
                    for _ in 0..f {
                        mdata.extend(ch.iter().map(|&v| E::from_f32(v)));
                        invcnt.push(inv);
                    }
                }
            }
            let maskx = ctx.graph.constant(mdata, &[n, cf, hh, ww]);
            let invcnt = ctx.graph.constant(invcnt, &[n, cf]);
            let pooled = feats.mul(&maskx)?.sum_spatial()?.mul(&invcnt)?;
            let pooled = pooled.reshape(&[n, cf, 1, 1])?;
            let projected = match &self.projections[layer] {
                Projection::Grouped(conv) => conv.forward(ctx, &pooled)?,
                Projection::Shared(_) => unreachable!(),
            };
            projected.reshape(&[n, c, cfg.code_dim])
        } else {
            // pool the full feature width under each class mask:
            // one masked reduction of the feature map per class
            let mut per_class = Vec::with_capacity(c);
            for j in 0..c {
                let mut mdata = Vec::with_capacity(n * cf * hh * ww);
                let mut invcnt = Vec::with_capacity(n * cf);
                for rm in &resized {
                    let ch = rm.channel(j);
                    let count = ch.iter().filter(|&&v| v != 0.0).count();
                    let inv = if count > 0 {
                        E::from_f64(1.0 / count as f64)
                    } else {
                        E::zero()
                    };
                    for _ in 0..cf {
                        mdata.extend(ch.iter().map(|&v| E::from_f32(v)));
                        invcnt.push(inv);
                    }
                }
                let maskx = ctx.graph.constant(mdata, &[n, cf, hh, ww]);
                let invcnt = ctx.graph.constant(invcnt, &[n, cf]);
                let pooled = feats.mul(&maskx)?.sum_spatial()?.mul(&invcnt)?;
                per_class.push(pooled.reshape(&[n, 1, cf])?);
            }
            let refs: Vec<&Tensor<E>> = per_class.iter().collect();
            let pooled = concat(&refs, 1)?; // [N, C, CF]
            let projected = match &self.projections[layer] {
                Projection::Shared(lin) => lin.forward(ctx, &pooled)?,
                Projection::Grouped(_) => unreachable!(),
            };
            Ok(projected)
        }
    }

    /// Inference convenience: encode one f32 image to style codes.
    pub fn encode_styles(&self, image: &[f32], mask: &SemanticMask) -> Result<StyleCodes<E>> {
        let ctx = Forward::new(false);
        let data: Vec<E> = image.iter().map(|&v| E::from_f32(v)).collect();
        let img = ctx
            .graph
            .constant(data, &[1, 3, mask.height(), mask.width()]);
        let out = self.forward(&ctx, &img, &[mask])?;
        StyleCodes::new(out.value(), self.cfg.num_classes, self.cfg.style_width())
    }
}

impl<E: Scalar> ParamSet<E> for StyleEncoder<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.stem.visit(f);
        self.stem_norm.visit(f);
        for st in &self.downs {
            st.conv.visit(f);
            st.norm.visit(f);
        }
        for st in &self.ups {
            st.conv.visit(f);
            st.norm.visit(f);
        }
        for p in &self.projections {
            match p {
                Projection::Grouped(c) => c.visit(f),
                Projection::Shared(l) => l.visit(f),
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.stem.visit_mut(f);
        self.stem_norm.visit_mut(f);
        for st in &mut self.downs {
            st.conv.visit_mut(f);
            st.norm.visit_mut(f);
        }
        for st in &mut self.ups {
            st.conv.visit_mut(f);
            st.norm.visit_mut(f);
        }
        for p in &mut self.projections {
            match p {
                Projection::Grouped(c) => c.visit_mut(f),
                Projection::Shared(l) => l.visit_mut(f),
            }
        }
    }
}

/// Class-wise masked average pooling (the per-class style extraction rule):
/// `sum(features * mask) / count(mask)` per channel, zero for empty masks.
pub fn masked_average_pool<E: Scalar>(
    features: &Tensor<E>,
    mask_channel: &[f32],
    mask_h: usize,
    mask_w: usize,
) -> Result<Tensor<E>> {
    let s = features.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Dim(format!(
            "masked_average_pool: features must be [f,H,W], got {s:?}"
        )));
    }
    let (f, h, w) = (s[0], s[1], s[2]);
    if (mask_h, mask_w) != (h, w) {
        return Err(Error::Dim(format!(
            "masked_average_pool: mask {mask_h}x{mask_w} vs features spatial axes {h}x{w}"
        )));
    }
    if mask_channel.len() != h * w {
        return Err(Error::Dim(format!(
            "masked_average_pool: mask data length {} != {h}x{w}",
            mask_channel.len()
        )));
    }
    let count = mask_channel.iter().filter(|&&v| v != 0.0).count();
    let mut mdata = Vec::with_capacity(f * h * w);
    for _ in 0..f {
        mdata.extend(mask_channel.iter().map(|&v| E::from_f32(v)));
    }
    let maskx = features.graph().constant(mdata, &[f, h, w]);
    let summed = features.mul(&maskx)?.sum_spatial()?;
    let inv = if count > 0 {
        E::from_f64(1.0 / count as f64)
    } else {
        E::zero()
    };
    Ok(summed.scale(inv))
}
