//! Finite-difference verification suite covering every differentiable op
//! and every composite block, in 64-bit precision. Exposed to the CLI
//! (`grad-check`) and to the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{
    attention_loss, feature_matching_loss, hinge_losses, perceptual_loss, Discriminator,
    DiscriminatorConfig, DiscriminatorOutputs, FeaturePyramid, ScaleOutput,
};
use crate::attention::{CrossAttentionBlock, SelfAttentionBlock};
use crate::diversity::{diversity_loss, MappingConfig, MappingNetwork};
use crate::error::Result;
use crate::generator::{ConditioningMode, Generator, GeneratorConfig};
use crate::mask::SemanticMask;
use crate::mask_embedder::{EmbedderConfig, MaskEmbedder};
use crate::nn::{Forward, ParamSet};
use crate::style_encoder::{EncoderConfig, StyleEncoder};
use crate::tensor::gradcheck::{grad_check, CheckInput, GradCheckReport};
use crate::tensor::{concat, Graph, Tensor};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-4;

fn rng(salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed ^ salt)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero (for kinked ops like relu/abs).
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Reduce to a scalar with fixed random weights so gradients are non-uniform.
fn weighted_sum(t: &Tensor<f64>, salt: u64) -> Result<Tensor<f64>> {
    let mut r = rng(salt);
    let w = uniform(&mut r, t.numel(), -1.0, 1.0);
    let wt = t.graph().constant(w, t.shape());
    Ok(t.mul(&wt)?.sum_all())
}

fn random_mask(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> SemanticMask {
    let indices: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c) as u8).collect();
    SemanticMask::from_indices(&indices, c, h, w).unwrap()
}

/// Finite-difference check of a model's parameter gradients. Each parameter
/// is probed at up to `max_per_param` evenly strided elements.
pub fn grad_check_params<M: ParamSet<f64>>(
    name: &str,
    model: &mut M,
    forward: impl Fn(&Forward<f64>, &M) -> Result<Tensor<f64>>,
    max_per_param: usize,
) -> Result<GradCheckReport> {
    let ctx = Forward::new(true);
    let loss = forward(&ctx, model)?;
    loss.backward()?;
    let analytic = ctx.grads()?;

    let eval = |m: &M| -> Result<f64> {
        let ctx = Forward::new(false);
        Ok(forward(&ctx, m)?.item())
    };

    let mut names: Vec<(String, usize)> = Vec::new();
    model.visit(&mut |p| names.push((p.name.clone(), p.numel())));

    let mut per_parameter_errors = Vec::with_capacity(names.len());
    let mut max_relative_error = 0.0f64;
    for (pname, numel) in &names {
        let grad = analytic.get(pname).cloned().unwrap_or_default();
        let stride = (numel / max_per_param).max(1);
        let mut worst = 0.0f64;
        for ei in (0..*numel).step_by(stride) {
            nudge(model, pname, ei, STEP);
            let fp = eval(model)?;
            nudge(model, pname, ei, -2.0 * STEP);
            let fm = eval(model)?;
            nudge(model, pname, ei, STEP);
            let numeric = (fp - fm) / (2.0 * STEP);
            let a = grad.get(ei).copied().unwrap_or(0.0);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
        per_parameter_errors.push((pname.clone(), worst));
        max_relative_error = max_relative_error.max(worst);
    }
    Ok(GradCheckReport {
        op_name: name.into(),
        max_relative_error,
        per_parameter_errors,
        passed: max_relative_error < TOLERANCE,
    })
}

fn nudge<M: ParamSet<f64>>(model: &mut M, name: &str, idx: usize, delta: f64) {
    model.visit_mut(&mut |p| {
        if p.name == name {
            p.value[idx] += delta;
        }
    });
}

fn check_op(
    name: &str,
    f: impl Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[CheckInput],
) -> Result<GradCheckReport> {
    grad_check(name, f, inputs, TOLERANCE, STEP)
}

/// All elementary-op checks.
pub fn op_reports() -> Result<Vec<GradCheckReport>> {
    let mut r = rng(1);
    let mut out = Vec::new();
    let shape = [2usize, 3, 4, 4];
    let n: usize = shape.iter().product();
    let a = CheckInput::new("a", &shape, uniform(&mut r, n, -1.0, 1.0));
    let b = CheckInput::new("b", &shape, uniform(&mut r, n, -1.0, 1.0));

    out.push(check_op(
        "add",
        |_, t| weighted_sum(&t[0].add(&t[1])?, 2),
        &[a.clone(), b.clone()],
    )?);
    out.push(check_op(
        "sub",
        |_, t| weighted_sum(&t[0].sub(&t[1])?, 3),
        &[a.clone(), b.clone()],
    )?);
    out.push(check_op(
        "mul",
        |_, t| weighted_sum(&t[0].mul(&t[1])?, 4),
        &[a.clone(), b.clone()],
    )?);
    out.push(check_op(
        "scale",
        |_, t| weighted_sum(&t[0].scale(1.7), 5),
        &[a.clone()],
    )?);
    out.push(check_op(
        "add_scalar",
        |_, t| weighted_sum(&t[0].add_scalar(0.3), 6),
        &[a.clone()],
    )?);
    let kinked = CheckInput::new("x", &shape, off_zero(&mut r, n));
    out.push(check_op(
        "relu",
        |_, t| weighted_sum(&t[0].relu(), 7),
        &[kinked.clone()],
    )?);
    out.push(check_op(
        "leaky_relu",
        |_, t| weighted_sum(&t[0].leaky_relu(0.2), 8),
        &[kinked.clone()],
    )?);
    out.push(check_op(
        "sigmoid",
        |_, t| weighted_sum(&t[0].sigmoid(), 9),
        &[a.clone()],
    )?);
    out.push(check_op(
        "tanh",
        |_, t| weighted_sum(&t[0].tanh(), 10),
        &[a.clone()],
    )?);
    let positive = CheckInput::new("x", &shape, uniform(&mut r, n, 0.2, 2.0));
    out.push(check_op(
        "log",
        |_, t| weighted_sum(&t[0].log(), 11),
        &[positive.clone()],
    )?);
    out.push(check_op(
        "abs",
        |_, t| weighted_sum(&t[0].abs(), 12),
        &[kinked.clone()],
    )?);
    // samples are bounded away from the clamp knees at +-0.6
    out.push(check_op(
        "clamp",
        |_, t| weighted_sum(&t[0].clamp(-0.6, 0.6), 13),
        &[CheckInput::new(
            "x",
            &shape,
            (0..n)
                .map(|_| {
                    let v = r.gen_range(0.0..0.5);
                    if r.gen::<bool>() {
                        v
                    } else {
                        0.7 + v
                    }
                })
                .collect(),
        )],
    )?);
    out.push(check_op("sum_all", |_, t| Ok(t[0].sum_all()), &[a.clone()])?);
    out.push(check_op("mean_all", |_, t| Ok(t[0].mean_all()), &[a.clone()])?);
    out.push(check_op(
        "sum_spatial",
        |_, t| weighted_sum(&t[0].sum_spatial()?, 14),
        &[a.clone()],
    )?);
    out.push(check_op(
        "softmax",
        |_, t| weighted_sum(&t[0].softmax(1)?, 15),
        &[a.clone()],
    )?);
    out.push(check_op(
        "reshape",
        |_, t| weighted_sum(&t[0].reshape(&[6, 16])?, 16),
        &[a.clone()],
    )?);
    out.push(check_op(
        "permute",
        |_, t| weighted_sum(&t[0].permute(&[2, 0, 3, 1])?, 17),
        &[a.clone()],
    )?);
    out.push(check_op(
        "concat",
        |_, t| weighted_sum(&concat(&[&t[0], &t[1]], 1)?, 18),
        &[a.clone(), b.clone()],
    )?);
    out.push(check_op(
        "upsample2x",
        |_, t| weighted_sum(&t[0].upsample2x()?, 19),
        &[a.clone()],
    )?);
    out.push(check_op(
        "avgpool2x",
        |_, t| weighted_sum(&t[0].avgpool2x()?, 20),
        &[a.clone()],
    )?);

    let x = CheckInput::new("x", &[3, 5], uniform(&mut r, 15, -1.0, 1.0));
    let w = CheckInput::new("w", &[4, 5], uniform(&mut r, 20, -1.0, 1.0));
    let bias = CheckInput::new("b", &[4], uniform(&mut r, 4, -1.0, 1.0));
    out.push(check_op(
        "linear",
        |_, t| weighted_sum(&t[0].linear(&t[1], Some(&t[2]))?, 21),
        &[x, w, bias],
    )?);

    let cx = CheckInput::new("x", &[2, 4, 5, 5], uniform(&mut r, 200, -1.0, 1.0));
    let cw = CheckInput::new("w", &[6, 2, 3, 3], uniform(&mut r, 108, -1.0, 1.0));
    let cb = CheckInput::new("b", &[6], uniform(&mut r, 6, -1.0, 1.0));
    out.push(check_op(
        "conv2d_grouped_strided",
        |_, t| weighted_sum(&t[0].conv2d(&t[1], Some(&t[2]), 2, 1, 2)?, 22),
        &[cx.clone(), cw, cb],
    )?);

    let gamma = CheckInput::new("gamma", &[4], uniform(&mut r, 4, 0.5, 1.5));
    let beta = CheckInput::new("beta", &[4], uniform(&mut r, 4, -0.5, 0.5));
    out.push(check_op(
        "group_norm",
        |_, t| weighted_sum(&t[0].group_norm(2, &t[1], &t[2], 1e-5)?, 23),
        &[cx, gamma, beta],
    )?);

    let ba = CheckInput::new("a", &[2, 3, 4], uniform(&mut r, 24, -1.0, 1.0));
    let bb = CheckInput::new("b", &[2, 4, 5], uniform(&mut r, 40, -1.0, 1.0));
    out.push(check_op(
        "bmm",
        |_, t| weighted_sum(&t[0].bmm(&t[1])?, 24),
        &[ba.clone(), bb],
    )?);
    let bc = CheckInput::new("b", &[2, 5, 4], uniform(&mut r, 40, -1.0, 1.0));
    out.push(check_op(
        "bmm_nt",
        |_, t| weighted_sum(&t[0].bmm_nt(&t[1])?, 25),
        &[ba, bc],
    )?);

    Ok(out)
}

/// Loss-function checks with inputs as the differentiation targets.
pub fn loss_reports() -> Result<Vec<GradCheckReport>> {
    let mut r = rng(2);
    let mut out = Vec::new();

    // hinge: scores bounded away from the +-1 knees
    let real = CheckInput::new("real", &[1, 1, 3, 3], off_knee(&mut r, 9));
    let fake = CheckInput::new("fake", &[1, 1, 3, 3], off_knee(&mut r, 9));
    out.push(check_op(
        "hinge_losses",
        |_, t| {
            let (d, g) = hinge_losses(&wrap(&t[0]), &wrap(&t[1]))?;
            d.add(&g.scale(0.5))
        },
        &[real.clone(), fake.clone()],
    )?);
    out.push(check_op(
        "feature_matching_loss",
        |_, t| feature_matching_loss(&wrap(&t[0]), &wrap(&t[1])),
        &[real, fake],
    )?);

    let img_a = CheckInput::new("a", &[1, 3, 8, 8], uniform(&mut r, 192, -0.9, 0.9));
    let img_b = CheckInput::new("b", &[1, 3, 8, 8], uniform(&mut r, 192, -0.9, 0.9));
    out.push(check_op(
        "perceptual_loss",
        |g, t| {
            let pyramid: FeaturePyramid<f64> = FeaturePyramid::new(42);
            let ctx = Forward::over(g.clone(), false);
            perceptual_loss(&pyramid, &ctx, &t[0], &t[1])
        },
        &[img_a.clone(), img_b.clone()],
    )?);
    out.push(check_op(
        "diversity_loss",
        |_, t| diversity_loss(&t[0], &t[1]),
        &[img_a, img_b],
    )?);

    let mut mr = rng(3);
    let mask = random_mask(&mut mr, 3, 4, 4);
    let logits = CheckInput::new("logits", &[1, 2, 3, 4, 4], uniform(&mut r, 96, -1.0, 1.0));
    out.push(check_op(
        "attention_loss",
        move |_, t| {
            // softmax over the class axis keeps the maps row-stochastic
            let maps = t[0].softmax(2)?;
            attention_loss(&[maps], &[&mask])
        },
        &[logits],
    )?);

    Ok(out)
}

fn off_knee(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = r.gen_range(0.05..0.9);
            let side = r.gen_range(0..3);
            match side {
                0 => v - 2.0,   // below -1
                1 => v * 1.8 - 0.9, // inside (-1, 1)
                _ => 1.0 + v,   // above +1
            }
        })
        .collect()
}

fn wrap(score: &Tensor<f64>) -> DiscriminatorOutputs<f64> {
    DiscriminatorOutputs {
        scales: vec![ScaleOutput {
            score: score.clone(),
            features: vec![score.clone()],
        }],
    }
}

/// Composite-block parameter checks on toy configurations.
pub fn block_reports() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let mut r = rng(4);

    // style encoder, grouped and ungrouped arms
    for (grouped, name) in [(true, "style_encoder_grouped"), (false, "style_encoder_plain")] {
        let cfg = EncoderConfig {
            num_classes: 2,
            filters_per_group: 2,
            down_layers: 3,
            up_layers: 2,
            code_dim: 3,
            grouped,
            input_mixing: true,
        };
        let mut enc: StyleEncoder<f64> = StyleEncoder::new(cfg, &mut r)?;
        let img = uniform(&mut r, 3 * 8 * 8, -0.9, 0.9);
        let mask = random_mask(&mut r, 2, 8, 8);
        out.push(grad_check_params(
            name,
            &mut enc,
            move |ctx, m| {
                let x = ctx.graph.constant(img.clone(), &[1, 3, 8, 8]);
                weighted_sum(&m.forward(ctx, &x, &[&mask])?, 30)
            },
            4,
        )?);
    }

    // mask embedder
    let mut emb: MaskEmbedder<f64> = MaskEmbedder::new(
        EmbedderConfig {
            num_classes: 2,
            input_h: 16,
            input_w: 16,
        },
        &mut r,
    );
    let mask16 = random_mask(&mut r, 2, 16, 16);
    out.push(grad_check_params(
        "mask_embedder",
        &mut emb,
        move |ctx, m| weighted_sum(&m.forward(ctx, &[&mask16])?, 31),
        4,
    )?);

    // self-attention / spatial transformer block
    let mut sa: SelfAttentionBlock<f64> = SelfAttentionBlock::new("self_attn", 8, &mut r)?;
    let xa = uniform(&mut r, 8 * 16, -0.9, 0.9);
    out.push(grad_check_params(
        "self_attention_block",
        &mut sa,
        move |ctx, m| {
            let x = ctx.graph.constant(xa.clone(), &[1, 8, 4, 4]);
            weighted_sum(&m.forward(ctx, &x)?, 32)
        },
        4,
    )?);

    // cross-attention block, loss touching both features and maps
    let mut ca: CrossAttentionBlock<f64> = CrossAttentionBlock::new("cross_attn", 8, 6, &mut r)?;
    let xc = uniform(&mut r, 8 * 16, -0.9, 0.9);
    let sc = uniform(&mut r, 2 * 6, -0.9, 0.9);
    out.push(grad_check_params(
        "cross_attention_block",
        &mut ca,
        move |ctx, m| {
            let x = ctx.graph.constant(xc.clone(), &[1, 8, 4, 4]);
            let s = ctx.graph.constant(sc.clone(), &[1, 2, 6]);
            let o = m.forward(ctx, &x, &s)?;
            weighted_sum(&o.features, 33)?.add(&weighted_sum(&o.maps, 34)?)
        },
        4,
    )?);

    // tiny generator (residual blocks, lift, attention, final head)
    let gcfg = GeneratorConfig {
        num_classes: 2,
        style_width: 6,
        base_resolution: 4,
        block_widths: vec![6, 4],
        self_attention_cutoff: 8,
        conditioning: ConditioningMode::CrossAttention,
        embedded_seed: true,
    };
    let mut gen: Generator<f64> = Generator::new(gcfg, &mut r)?;
    let gm = random_mask(&mut r, 2, 16, 16);
    let gs = uniform(&mut r, 2 * 6, -0.9, 0.9);
    let ge = uniform(&mut r, 2 * 16 * 16, -0.9, 0.9);
    out.push(grad_check_params(
        "generator",
        &mut gen,
        move |ctx, m| {
            let s = ctx.graph.constant(gs.clone(), &[1, 2, 6]);
            let e = ctx.graph.constant(ge.clone(), &[1, 2, 16, 16]);
            let sample = m.forward(ctx, &[&gm], &s, Some(&e))?;
            weighted_sum(&sample.image, 35)
        },
        3,
    )?);

    // generator with the mask-modulation conditioning (ablation arm)
    let gcfg2 = GeneratorConfig {
        num_classes: 2,
        style_width: 6,
        base_resolution: 4,
        block_widths: vec![6, 4],
        self_attention_cutoff: 8,
        conditioning: ConditioningMode::MaskModulation,
        embedded_seed: false,
    };
    let mut gen2: Generator<f64> = Generator::new(gcfg2, &mut r)?;
    let gm2 = random_mask(&mut r, 2, 16, 16);
    let gs2 = uniform(&mut r, 2 * 6, -0.9, 0.9);
    out.push(grad_check_params(
        "generator_mask_modulation",
        &mut gen2,
        move |ctx, m| {
            let s = ctx.graph.constant(gs2.clone(), &[1, 2, 6]);
            let sample = m.forward(ctx, &[&gm2], &s, None)?;
            weighted_sum(&sample.image, 36)
        },
        3,
    )?);

    // discriminator
    let dcfg = DiscriminatorConfig {
        num_classes: 2,
        num_scales: 2,
        base_width: 4,
        num_layers: 2,
    };
    let mut disc: Discriminator<f64> = Discriminator::new(dcfg, &mut r);
    let dm = random_mask(&mut r, 2, 32, 32);
    let di = uniform(&mut r, 3 * 32 * 32, -0.9, 0.9);
    out.push(grad_check_params(
        "discriminator",
        &mut disc,
        move |ctx, m| {
            let x = ctx.graph.constant(di.clone(), &[1, 3, 32, 32]);
            let o = m.forward(ctx, &x, &[&dm])?;
            let mut loss = weighted_sum(&o.scales[0].score, 37)?;
            for (i, s) in o.scales.iter().enumerate() {
                for (j, f) in s.features.iter().enumerate() {
                    loss = loss.add(&weighted_sum(f, 38 + (i * 7 + j) as u64)?)?;
                }
            }
            Ok(loss)
        },
        3,
    )?);

    // mapping network
    let mcfg = MappingConfig {
        num_classes: 2,
        noise_dim: 5,
        trunk_layers: 2,
        trunk_width: 6,
        branch_layers: 2,
        branch_out: 4,
    };
    let mut map: MappingNetwork<f64> = MappingNetwork::new(mcfg, &mut r)?;
    let z = uniform(&mut r, 2 * 5, -0.9, 0.9);
    out.push(grad_check_params(
        "mapping_network",
        &mut map,
        move |ctx, m| {
            let zt = ctx.graph.constant(z.clone(), &[2, 5]);
            weighted_sum(&m.forward(ctx, &zt)?, 39)
        },
        4,
    )?);

    Ok(out)
}

/// The full verification suite.
pub fn run_all() -> Result<Vec<GradCheckReport>> {
    let mut reports = op_reports()?;
    reports.extend(loss_reports()?);
    reports.extend(block_reports()?);
    Ok(reports)
}
