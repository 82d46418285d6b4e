//! Noise-to-style mapping network and the diversity objective. A shared
//! trunk processes the noise vector, then one branch per semantic class
//! emits that class's style row, so noise can be resampled per class.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Forward, Linear, Param, ParamSet};
use crate::tensor::{concat, Scalar, Tensor};

const LEAKY_SLOPE: f64 = 0.2;
const OUTPUT_INIT_SCALE: f64 = 0.01;
const OUTPUT_BOUND: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct MappingConfig {
    pub num_classes: usize,
    pub noise_dim: usize,
    pub trunk_layers: usize,
    pub trunk_width: usize,
    pub branch_layers: usize,
    /// Must equal the style code width consumed by the generator.
    pub branch_out: usize,
}

impl MappingConfig {
    pub fn new(num_classes: usize, style_width: usize) -> Self {
        MappingConfig {
            num_classes,
            noise_dim: 512,
            trunk_layers: 3,
            trunk_width: 512,
            branch_layers: 4,
            branch_out: style_width,
        }
    }
}

pub struct MappingNetwork<E: Scalar> {
    pub cfg: MappingConfig,
    trunk: Vec<Linear<E>>,
    branches: Vec<Vec<Linear<E>>>,
}

impl<E: Scalar> MappingNetwork<E> {
    pub fn new(cfg: MappingConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.trunk_layers == 0 || cfg.branch_layers == 0 {
            return Err(Error::Config("mapping: layer counts must be positive".into()));
        }
        let mut trunk = Vec::with_capacity(cfg.trunk_layers);
        let mut din = cfg.noise_dim;
        for i in 0..cfg.trunk_layers {
            trunk.push(Linear::new(&format!("mapping.trunk{i}"), din, cfg.trunk_width, rng));
            din = cfg.trunk_width;
        }
        let mut branches = Vec::with_capacity(cfg.num_classes);
        for j in 0..cfg.num_classes {
            let mut branch = Vec::with_capacity(cfg.branch_layers);
            let mut din = cfg.trunk_width;
            for i in 0..cfg.branch_layers {
                let last = i + 1 == cfg.branch_layers;
                let dout = if last { cfg.branch_out } else { cfg.trunk_width };
                let mut layer =
                    Linear::new(&format!("mapping.branch{j}.layer{i}"), din, dout, rng);
                if last {
                    // Start the emitted style rows near zero: the frozen
                    // generator was trained on encoder-scale codes, and
                    // full-scale random codes saturate its output tanh,
                    // killing every gradient before training can move.
                    for w in &mut layer.weight.value {
                        *w = *w * E::from_f64(OUTPUT_INIT_SCALE);
                    }
                }
                branch.push(layer);
                din = dout;
            }
            branches.push(branch);
        }
        Ok(MappingNetwork { cfg, trunk, branches })
    }

    fn trunk_forward(&self, ctx: &Forward<E>, z: &Tensor<E>) -> Result<Tensor<E>> {
        let s = z.shape().to_vec();
        if s.len() != 2 || s[1] != self.cfg.noise_dim {
            return Err(Error::Dim(format!(
                "mapping: z must be [N, {}], got {s:?}",
                self.cfg.noise_dim
            )));
        }
        let slope = E::from_f64(LEAKY_SLOPE);
        let mut h = z.clone();
        for layer in &self.trunk {
            h = layer.forward(ctx, &h)?.leaky_relu(slope);
        }
        Ok(h)
    }

    fn branch_forward(&self, ctx: &Forward<E>, j: usize, h: &Tensor<E>) -> Result<Tensor<E>> {
        let slope = E::from_f64(LEAKY_SLOPE);
        let n = h.shape()[0];
        let branch = &self.branches[j];
        let mut y = h.clone();
        for (i, layer) in branch.iter().enumerate() {
            y = layer.forward(ctx, &y)?;
            if i + 1 != branch.len() {
                y = y.leaky_relu(slope);
            }
        }
        // Smoothly bound the emitted codes: the downstream generator is
        // frozen, so codes far outside its training range only saturate its
        // output and kill the gradients this network trains on.
        let bound = E::from_f64(OUTPUT_BOUND);
        y = y.scale(E::one() / bound).tanh().scale(bound);
        y.reshape(&[n, 1, self.cfg.branch_out])
    }

    /// `z` is [N, noise_dim]; returns style rows [N, C, branch_out].
    pub fn forward(&self, ctx: &Forward<E>, z: &Tensor<E>) -> Result<Tensor<E>> {
        let h = self.trunk_forward(ctx, z)?;
        let mut rows = Vec::with_capacity(self.branches.len());
        for j in 0..self.branches.len() {
            rows.push(self.branch_forward(ctx, j, &h)?);
        }
        concat(&rows.iter().collect::<Vec<_>>(), 1)
    }

    /// Per-class noise resampling: class `j` takes its style row from `z1`
    /// where `keep[j]` is true and from `z2` otherwise.
    pub fn forward_mixed(
        &self,
        ctx: &Forward<E>,
        z1: &Tensor<E>,
        z2: &Tensor<E>,
        keep: &[bool],
    ) -> Result<Tensor<E>> {
        if keep.len() != self.branches.len() {
            return Err(Error::Dim(format!(
                "mapping: keep has {} entries for {} classes",
                keep.len(),
                self.branches.len()
            )));
        }
        let h1 = self.trunk_forward(ctx, z1)?;
        let h2 = self.trunk_forward(ctx, z2)?;
        let mut rows = Vec::with_capacity(self.branches.len());
        for (j, &k) in keep.iter().enumerate() {
            rows.push(self.branch_forward(ctx, j, if k { &h1 } else { &h2 })?);
        }
        concat(&rows.iter().collect::<Vec<_>>(), 1)
    }

    /// Inference convenience: one noise vector to plain style rows.
    pub fn map_noise(&self, z: &[E]) -> Result<Vec<E>> {
        let ctx = Forward::new(false);
        let zt = ctx.graph.constant(z.to_vec(), &[1, self.cfg.noise_dim]);
        Ok(self.forward(&ctx, &zt)?.value())
    }
}

impl<E: Scalar> ParamSet<E> for MappingNetwork<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        for l in &self.trunk {
            l.visit(f);
        }
        for b in &self.branches {
            for l in b {
                l.visit(f);
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        for l in &mut self.trunk {
            l.visit_mut(f);
        }
        for b in &mut self.branches {
            for l in b {
                l.visit_mut(f);
            }
        }
    }
}

/// Mean absolute difference between two generations restricted to the pixels
/// where `weights` is 1. `total` is the weight sum, precomputed by the caller
/// (a zero total yields a zero loss, since the numerator is also zero).
pub fn masked_l1<E: Scalar>(
    img1: &Tensor<E>,
    img2: &Tensor<E>,
    weights: &Tensor<E>,
    total: f64,
) -> Result<Tensor<E>> {
    if img1.shape() != img2.shape() || img1.shape() != weights.shape() {
        return Err(Error::Dim(format!(
            "masked l1: shapes {:?} / {:?} / {:?}",
            img1.shape(),
            img2.shape(),
            weights.shape()
        )));
    }
    Ok(img1
        .sub(img2)?
        .abs()
        .mul(weights)?
        .sum_all()
        .scale(E::from_f64(1.0 / total.max(1.0))))
}

/// Negative mean L1 between two generations; minimizing it pushes the two
/// images apart.
pub fn diversity_loss<E: Scalar>(img1: &Tensor<E>, img2: &Tensor<E>) -> Result<Tensor<E>> {
    if img1.shape() != img2.shape() {
        return Err(Error::Dim(format!(
            "diversity loss: shapes {:?} vs {:?}",
            img1.shape(),
            img2.shape()
        )));
    }
    Ok(img1.sub(img2)?.abs().mean_all().scale(-E::one()))
}
