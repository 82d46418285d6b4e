//! Mask parts embedder: each mask channel is flattened and passed through a
//! single linear layer shared across channels, giving one 256-dim latent
//! code per class. The C codes double as a C x 16 x 16 spatial seed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mask::SemanticMask;
use crate::nn::{Forward, Linear, Param, ParamSet};
use crate::tensor::{Graph, Scalar, Tensor};

pub const CODE_DIM: usize = 256;
pub const SPATIAL_SIDE: usize = 16;

#[derive(Debug, Clone)]
pub struct EmbedderConfig {
    pub num_classes: usize,
    /// Spatial size of the masks fed to the embedder (input is H*W flattened).
    pub input_h: usize,
    pub input_w: usize,
}

/// Per-class latent codes of the mask, C x 256, viewable as C x 16 x 16.
#[derive(Debug, Clone)]
pub struct MaskEmbedding<E: Scalar> {
    pub codes: Vec<E>,
    pub num_classes: usize,
}

impl<E: Scalar> MaskEmbedding<E> {
    pub fn new(codes: Vec<E>, num_classes: usize) -> Result<Self> {
        if codes.len() != num_classes * CODE_DIM {
            return Err(Error::Dim(format!(
                "mask embedding length {} != {num_classes}x{CODE_DIM}",
                codes.len()
            )));
        }
        Ok(MaskEmbedding { codes, num_classes })
    }

    pub fn code(&self, j: usize) -> &[E] {
        &self.codes[j * CODE_DIM..(j + 1) * CODE_DIM]
    }

    pub fn replace_code(&mut self, j: usize, other: &MaskEmbedding<E>) {
        self.codes[j * CODE_DIM..(j + 1) * CODE_DIM].copy_from_slice(other.code(j));
    }

    /// The same data viewed as [C, 16, 16].
    pub fn spatial_shape(&self) -> [usize; 3] {
        [self.num_classes, SPATIAL_SIDE, SPATIAL_SIDE]
    }

    /// Constant graph leaf [1, C, 16, 16].
    pub fn to_tensor<E2: Scalar>(&self, g: &Graph<E2>) -> Tensor<E2>
    where
        E: Scalar,
    {
        let data: Vec<E2> = self.codes.iter().map(|&v| E2::from_f64(v.into_f64())).collect();
        g.constant(data, &[1, self.num_classes, SPATIAL_SIDE, SPATIAL_SIDE])
    }
}

/// The mask embedder: one shared linear layer applied channel-wise.
pub struct MaskEmbedder<E: Scalar> {
    pub cfg: EmbedderConfig,
    linear: Linear<E>,
}

impl<E: Scalar> MaskEmbedder<E> {
    pub fn new(cfg: EmbedderConfig, rng: &mut impl Rng) -> Self {
        let linear = Linear::new(
            "mask_embedder.linear",
            cfg.input_h * cfg.input_w,
            CODE_DIM,
            rng,
        );
        MaskEmbedder { cfg, linear }
    }

    /// Batched forward: masks -> [N, C, 16, 16] seed tensor.
    pub fn forward(&self, ctx: &Forward<E>, masks: &[&SemanticMask]) -> Result<Tensor<E>> {
        let c = self.cfg.num_classes;
        let hw = self.cfg.input_h * self.cfg.input_w;
        let n = masks.len();
        let mut data = Vec::with_capacity(n * c * hw);
        for m in masks {
            if m.num_classes() != c {
                return Err(Error::Config(format!(
                    "mask embedder: mask has {} classes, config says {c}",
                    m.num_classes()
                )));
            }
            if m.height() != self.cfg.input_h || m.width() != self.cfg.input_w {
                return Err(Error::Config(format!(
                    "mask embedder: mask {}x{} does not match configured input {}x{}",
                    m.height(),
                    m.width(),
                    self.cfg.input_h,
                    self.cfg.input_w
                )));
            }
            data.extend(m.data().iter().map(|&v| E::from_f32(v)));
        }
        // each channel is an independent row through the shared linear layer
        let flat = ctx.graph.constant(data, &[n * c, hw]);
        let codes = self.linear.forward(ctx, &flat)?;
        codes.reshape(&[n, c, SPATIAL_SIDE, SPATIAL_SIDE])
    }

    /// Inference convenience: embed one mask.
    pub fn embed_mask(&self, mask: &SemanticMask) -> Result<MaskEmbedding<E>> {
        let ctx = Forward::new(false);
        let out = self.forward(&ctx, &[mask])?;
        MaskEmbedding::new(out.value(), self.cfg.num_classes)
    }
}

impl<E: Scalar> ParamSet<E> for MaskEmbedder<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.linear.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.linear.visit_mut(f);
    }
}

/// Per-class affine interpolation of two embeddings:
/// selected classes get `alpha * e1 + (1 - alpha) * e2`, others copy `e1`.
pub fn interpolate_embeddings<E: Scalar>(
    e1: &MaskEmbedding<E>,
    e2: &MaskEmbedding<E>,
    classes: &[usize],
    alpha: f64,
) -> Result<MaskEmbedding<E>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Arg(format!("alpha {alpha} outside [0, 1]")));
    }
    if e1.num_classes != e2.num_classes {
        return Err(Error::Dim(format!(
            "embeddings have {} vs {} classes",
            e1.num_classes, e2.num_classes
        )));
    }
    for &j in classes {
        if j >= e1.num_classes {
            return Err(Error::Arg(format!(
                "class {j} out of range (C = {})",
                e1.num_classes
            )));
        }
    }
    let a = E::from_f64(alpha);
    let b = E::from_f64(1.0 - alpha);
    let mut out = e1.clone();
    // endpoints copy bitwise rather than multiplying by 0/1
    if alpha == 1.0 {
        return Ok(out);
    }
    if alpha == 0.0 {
        for &j in classes {
            out.replace_code(j, e2);
        }
        return Ok(out);
    }
    for &j in classes {
        for (o, (&x1, &x2)) in out.codes[j * CODE_DIM..(j + 1) * CODE_DIM]
            .iter_mut()
            .zip(e1.code(j).iter().zip(e2.code(j)))
        {
            *o = a * x1 + b * x2;
        }
    }
    Ok(out)
}
