//! Multi-head self- and cross-attention blocks operating on spatial feature
//! maps. Queries always come from flattened image features; cross-attention
//! keys and values come from per-class style rows, so the attention map of a
//! cross block has one column per semantic class.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Forward, GroupNorm, Linear, Param, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Target per-head width; heads are added once the model width exceeds it.
pub const HEAD_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    /// Split `model_dim` into heads of width [`HEAD_DIM`]; narrower widths
    /// get a single head spanning the whole dimension.
    pub fn for_dim(model_dim: usize) -> Result<Self> {
        if model_dim == 0 {
            return Err(Error::Config("attention: model_dim must be positive".into()));
        }
        if model_dim >= HEAD_DIM {
            if model_dim % HEAD_DIM != 0 {
                return Err(Error::Config(format!(
                    "attention: model_dim {model_dim} not divisible by head width {HEAD_DIM}"
                )));
            }
            Ok(AttentionConfig {
                model_dim,
                num_heads: model_dim / HEAD_DIM,
                head_dim: HEAD_DIM,
            })
        } else {
            Ok(AttentionConfig {
                model_dim,
                num_heads: 1,
                head_dim: model_dim,
            })
        }
    }
}

/// Scaled dot-product attention map: softmax over keys of `q k^T / sqrt(d)`.
/// `q` is [B, M, d], `k` is [B, N, d]; result is [B, M, N].
pub fn attention_map<E: Scalar>(q: &Tensor<E>, k: &Tensor<E>) -> Result<Tensor<E>> {
    let d = *q.shape().last().ok_or_else(|| Error::Dim("attention_map: scalar q".into()))?;
    let scores = q.bmm_nt(k)?.scale(E::from_f64(1.0 / (d as f64).sqrt()));
    scores.softmax(2)
}

/// Weighted sum of values: `map` [B, M, N] x `v` [B, N, d] -> [B, M, d].
pub fn attend<E: Scalar>(map: &Tensor<E>, v: &Tensor<E>) -> Result<Tensor<E>> {
    map.bmm(v)
}

fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

// [N, C, H, W] -> [N, HW, C] token rows.
fn to_tokens<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape().to_vec();
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

// [N, HW, C] -> [N, C, H, W].
fn from_tokens<E: Scalar>(x: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let s = x.shape().to_vec();
    x.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], h, w])
}

// [N, M, model_dim] -> [N*heads, M, head_dim].
fn split_heads<E: Scalar>(x: &Tensor<E>, cfg: &AttentionConfig) -> Result<Tensor<E>> {
    let s = x.shape().to_vec();
    x.reshape(&[s[0], s[1], cfg.num_heads, cfg.head_dim])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[s[0] * cfg.num_heads, s[1], cfg.head_dim])
}

// [N*heads, M, head_dim] -> [N, M, model_dim].
fn merge_heads<E: Scalar>(x: &Tensor<E>, n: usize, cfg: &AttentionConfig) -> Result<Tensor<E>> {
    let s = x.shape().to_vec();
    x.reshape(&[n, cfg.num_heads, s[1], cfg.head_dim])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, s[1], cfg.model_dim])
}

/// Position-wise feed-forward with pre-normalization and a residual path.
#[derive(Debug, Clone)]
struct FeedForward<E: Scalar> {
    norm: GroupNorm<E>,
    expand: Linear<E>,
    contract: Linear<E>,
}

impl<E: Scalar> FeedForward<E> {
    fn new(name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            norm: GroupNorm::new(&format!("{name}.norm"), dim, norm_groups(dim)),
            expand: Linear::new(&format!("{name}.expand"), dim, 4 * dim, rng),
            // zero-init so the block is the identity at initialization
            contract: Linear::new_zeroed(&format!("{name}.contract"), 4 * dim, dim),
        }
    }

    fn forward(&self, ctx: &Forward<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let y = to_tokens(&self.norm.forward(ctx, x)?)?;
        let y = self.expand.forward(ctx, &y)?.relu();
        let y = self.contract.forward(ctx, &y)?;
        x.add(&from_tokens(&y, h, w)?)
    }
}

impl<E: Scalar> ParamSet<E> for FeedForward<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.norm.visit(f);
        self.expand.visit(f);
        self.contract.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.norm.visit_mut(f);
        self.expand.visit_mut(f);
        self.contract.visit_mut(f);
    }
}

/// Self-attention over the spatial positions of a feature map.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock<E: Scalar> {
    pub cfg: AttentionConfig,
    norm: GroupNorm<E>,
    q: Linear<E>,
    k: Linear<E>,
    v: Linear<E>,
    out: Linear<E>,
    ff: FeedForward<E>,
}

impl<E: Scalar> SelfAttentionBlock<E> {
    pub fn new(name: &str, model_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let cfg = AttentionConfig::for_dim(model_dim)?;
        Ok(SelfAttentionBlock {
            cfg,
            norm: GroupNorm::new(&format!("{name}.norm"), model_dim, norm_groups(model_dim)),
            q: Linear::new(&format!("{name}.q"), model_dim, model_dim, rng),
            k: Linear::new(&format!("{name}.k"), model_dim, model_dim, rng),
            v: Linear::new(&format!("{name}.v"), model_dim, model_dim, rng),
            out: Linear::new_zeroed(&format!("{name}.out"), model_dim, model_dim),
            ff: FeedForward::new(&format!("{name}.ff"), model_dim, rng),
        })
    }

    /// `x` is [N, model_dim, H, W]; output has the same shape.
    pub fn forward(&self, ctx: &Forward<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[1] != self.cfg.model_dim {
            return Err(Error::Dim(format!(
                "self-attention: expected [N, {}, H, W], got {:?}",
                self.cfg.model_dim, s
            )));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let tokens = to_tokens(&self.norm.forward(ctx, x)?)?;
        let q = split_heads(&self.q.forward(ctx, &tokens)?, &self.cfg)?;
        let k = split_heads(&self.k.forward(ctx, &tokens)?, &self.cfg)?;
        let v = split_heads(&self.v.forward(ctx, &tokens)?, &self.cfg)?;
        let map = attention_map(&q, &k)?;
        let mixed = merge_heads(&attend(&map, &v)?, n, &self.cfg)?;
        let y = x.add(&from_tokens(&self.out.forward(ctx, &mixed)?, h, w)?)?;
        self.ff.forward(ctx, &y)
    }
}

impl<E: Scalar> ParamSet<E> for SelfAttentionBlock<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.norm.visit(f);
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.out.visit(f);
        self.ff.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.norm.visit_mut(f);
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.out.visit_mut(f);
        self.ff.visit_mut(f);
    }
}

/// Cross-attention from spatial features (queries) to per-class style rows
/// (keys and values). Exposes its attention maps for the attention loss.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock<E: Scalar> {
    pub cfg: AttentionConfig,
    pub style_width: usize,
    norm: GroupNorm<E>,
    q: Linear<E>,
    k: Linear<E>,
    v: Linear<E>,
    out: Linear<E>,
    ff: FeedForward<E>,
}

/// Output of a cross-attention block: the transformed features plus the
/// attention maps, reshaped to [N, heads, C, H, W].
pub struct CrossAttentionOutput<E: Scalar> {
    pub features: Tensor<E>,
    pub maps: Tensor<E>,
}

impl<E: Scalar> CrossAttentionBlock<E> {
    pub fn new(
        name: &str,
        model_dim: usize,
        style_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cfg = AttentionConfig::for_dim(model_dim)?;
        Ok(CrossAttentionBlock {
            cfg,
            style_width,
            norm: GroupNorm::new(&format!("{name}.norm"), model_dim, norm_groups(model_dim)),
            q: Linear::new(&format!("{name}.q"), model_dim, model_dim, rng),
            k: Linear::new(&format!("{name}.k"), style_width, model_dim, rng),
            v: Linear::new(&format!("{name}.v"), style_width, model_dim, rng),
            out: Linear::new_zeroed(&format!("{name}.out"), model_dim, model_dim),
            ff: FeedForward::new(&format!("{name}.ff"), model_dim, rng),
        })
    }

    /// `x` is [N, model_dim, H, W]; `styles` is [N, C, style_width].
    pub fn forward(
        &self,
        ctx: &Forward<E>,
        x: &Tensor<E>,
        styles: &Tensor<E>,
    ) -> Result<CrossAttentionOutput<E>> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[1] != self.cfg.model_dim {
            return Err(Error::Dim(format!(
                "cross-attention: expected [N, {}, H, W], got {:?}",
                self.cfg.model_dim, s
            )));
        }
        let ss = styles.shape().to_vec();
        if ss.len() != 3 || ss[0] != s[0] || ss[2] != self.style_width {
            return Err(Error::Dim(format!(
                "cross-attention: styles must be [{}, C, {}], got {:?}",
                s[0], self.style_width, ss
            )));
        }
        let (n, c, h, w) = (s[0], ss[1], s[2], s[3]);
        let tokens = to_tokens(&self.norm.forward(ctx, x)?)?;
        let q = split_heads(&self.q.forward(ctx, &tokens)?, &self.cfg)?;
        let k = split_heads(&self.k.forward(ctx, styles)?, &self.cfg)?;
        let v = split_heads(&self.v.forward(ctx, styles)?, &self.cfg)?;
        // map: [N*heads, HW, C]
        let map = attention_map(&q, &k)?;
        let mixed = merge_heads(&attend(&map, &v)?, n, &self.cfg)?;
        let y = x.add(&from_tokens(&self.out.forward(ctx, &mixed)?, h, w)?)?;
        let features = self.ff.forward(ctx, &y)?;
        let maps = map
            .permute(&[0, 2, 1])?
            .reshape(&[n, self.cfg.num_heads, c, h, w])?;
        Ok(CrossAttentionOutput { features, maps })
    }
}

impl<E: Scalar> ParamSet<E> for CrossAttentionBlock<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        self.norm.visit(f);
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.out.visit(f);
        self.ff.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.norm.visit_mut(f);
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.out.visit_mut(f);
        self.ff.visit_mut(f);
    }
}
