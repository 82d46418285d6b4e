//! Structural invariants: row-stochastic attention, exact group isolation,
//! exactly-zero cross-channel and cross-branch Jacobians, identity behavior
//! of zero-initialized blocks, and permutation equivariance of attention.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use semsynth::adversarial::Discriminator;
use semsynth::attention::{CrossAttentionBlock, SelfAttentionBlock};
use semsynth::config::RunConfig;
use semsynth::diversity::{MappingConfig, MappingNetwork};
use semsynth::mask::{masks_to_batch, SemanticMask};
use semsynth::mask_embedder::{EmbedderConfig, MaskEmbedder};
use semsynth::model::Models;
use semsynth::nn::{Forward, ParamSet};
use semsynth::style_encoder::{EncoderConfig, StyleEncoder};
use semsynth::tensor::{concat, Graph};

pub fn rng(salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xabcd ^ salt)
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn random_mask(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> SemanticMask {
    let idx: Vec<u8> = (0..h * w).map(|_| r.gen_range(0..c) as u8).collect();
    SemanticMask::from_indices(&idx, c, h, w).unwrap()
}

/// Overwrite every parameter (including zero-initialized ones) with random
/// normal values so identity shortcuts do not mask structural defects.
fn randomize<M: ParamSet<f64>>(model: &mut M, seed: u64) {
    let mut r = rng(seed);
    model.visit_mut(&mut |p| {
        for v in p.value.iter_mut() {
            *v = r.sample::<f64, _>(StandardNormal) * 0.3;
        }
    });
}

#[test]
pub fn cross_attention_maps_row_stochastic_over_classes() {
    let mut r = rng(1);
    let mut block: CrossAttentionBlock<f64> = CrossAttentionBlock::new("ca", 8, 6, &mut r).unwrap();
    randomize(&mut block, 2);
    let ctx = Forward::new(false);
    let (n, c, h, w) = (2, 3, 4, 4);
    let x = ctx.graph.constant(rand_vec(&mut r, n * 8 * h * w), &[n, 8, h, w]);
    let styles = ctx.graph.constant(rand_vec(&mut r, n * c * 6), &[n, c, 6]);
    let out = block.forward(&ctx, &x, &styles).unwrap();
    let s = out.maps.shape().to_vec();
    assert_eq!(s, vec![n, 1, c, h, w]);
    let v = out.maps.value();
    for ni in 0..n {
        for p in 0..h * w {
            let sum: f64 = (0..c).map(|j| v[(ni * c + j) * h * w + p]).sum();
            assert!((sum - 1.0).abs() < 1e-6, "class sum {sum} at ({ni},{p})");
        }
    }
}

#[test]
pub fn conv_group_isolation_is_exact() {
    let mut r = rng(3);
    let g = Graph::<f64>::new();
    let (n, cin, cout, h, w) = (1, 4, 4, 5, 5);
    let weight = g.constant(rand_vec(&mut r, cout * (cin / 2) * 9), &[cout, cin / 2, 3, 3]);
    let bias = g.constant(rand_vec(&mut r, cout), &[cout]);
    let mut x1 = rand_vec(&mut r, n * cin * h * w);
    let mut x2 = x1.clone();
    // perturb only group-2 input channels (channels 2 and 3)
    for v in x2[2 * h * w..].iter_mut() {
        *v += 1.0;
    }
    // and zero them in a third variant
    let mut x3 = x1.clone();
    for v in x3[2 * h * w..].iter_mut() {
        *v = 0.0;
    }
    x1.truncate(n * cin * h * w);
    let run = |x: &[f64]| {
        g.constant(x.to_vec(), &[n, cin, h, w])
            .conv2d(&weight, Some(&bias), 1, 1, 2)
            .unwrap()
            .value()
    };
    let (y1, y2, y3) = (run(&x1), run(&x2), run(&x3));
    let half = 2 * h * w;
    assert_eq!(&y1[..half], &y2[..half], "group-1 output leaked group-2 input");
    assert_eq!(&y1[..half], &y3[..half], "group-1 output leaked group-2 input");
    assert_ne!(&y1[half..], &y2[half..], "group-2 output should respond");
}

#[test]
pub fn mask_embedder_cross_channel_jacobian_zero() {
    let mut r = rng(4);
    let emb: MaskEmbedder<f64> = MaskEmbedder::new(
        EmbedderConfig {
            num_classes: 3,
            input_h: 8,
            input_w: 8,
        },
        &mut r,
    );
    // two masks identical in channel 0, swapped between classes 1 and 2
    let idx1: Vec<u8> = (0..64).map(|p| if p % 3 == 0 { 0 } else { 1 + (p % 2) as u8 }).collect();
    let idx2: Vec<u8> = idx1.iter().map(|&j| if j == 0 { 0 } else { 3 - j }).collect();
    let m1 = SemanticMask::from_indices(&idx1, 3, 8, 8).unwrap();
    let m2 = SemanticMask::from_indices(&idx2, 3, 8, 8).unwrap();
    assert_eq!(m1.channel(0), m2.channel(0));
    let e1 = emb.embed_mask(&m1).unwrap();
    let e2 = emb.embed_mask(&m2).unwrap();
    assert_eq!(e1.code(0), e2.code(0), "code 0 depends on other channels");
    assert_ne!(e1.code(1), e2.code(1));
    assert_ne!(e1.code(2), e2.code(2));
}

#[test]
pub fn mapping_cross_branch_jacobian_zero() {
    let mut r = rng(5);
    let cfg = MappingConfig {
        num_classes: 3,
        noise_dim: 4,
        trunk_layers: 2,
        trunk_width: 5,
        branch_layers: 2,
        branch_out: 6,
    };
    let mut map: MappingNetwork<f64> = MappingNetwork::new(cfg, &mut r).unwrap();
    let z = rand_vec(&mut r, 4);
    let before = map.map_noise(&z).unwrap();
    map.visit_mut(&mut |p| {
        if p.name.starts_with("mapping.branch1.") {
            for v in p.value.iter_mut() {
                *v += 0.1;
            }
        }
    });
    let after = map.map_noise(&z).unwrap();
    assert_eq!(before[..6], after[..6], "branch 0 row moved");
    assert_ne!(before[6..12], after[6..12], "branch 1 row should move");
    assert_eq!(before[12..], after[12..], "branch 2 row moved");
}

#[test]
pub fn mapping_identical_noise_identical_codes() {
    let mut r = rng(6);
    let map: MappingNetwork<f64> =
        MappingNetwork::new(MappingConfig::new(2, 6), &mut r).unwrap();
    let z = rand_vec(&mut r, 512);
    assert_eq!(map.map_noise(&z).unwrap(), map.map_noise(&z).unwrap());
}

#[test]
pub fn zero_init_attention_blocks_are_identities() {
    let mut r = rng(7);
    let sa: SelfAttentionBlock<f64> = SelfAttentionBlock::new("sa", 8, &mut r).unwrap();
    let ca: CrossAttentionBlock<f64> = CrossAttentionBlock::new("ca", 8, 6, &mut r).unwrap();
    let ctx = Forward::new(false);
    let xdata = rand_vec(&mut r, 8 * 16);
    let x = ctx.graph.constant(xdata.clone(), &[1, 8, 4, 4]);
    assert_eq!(sa.forward(&ctx, &x).unwrap().value(), xdata);
    let styles = ctx.graph.constant(rand_vec(&mut r, 2 * 6), &[1, 2, 6]);
    let out = ca.forward(&ctx, &x, &styles).unwrap();
    assert_eq!(out.features.value(), xdata);
    assert_eq!(out.maps.shape(), &[1, 1, 2, 4, 4]);
}

#[test]
pub fn self_attention_has_no_positional_encoding() {
    let mut r = rng(8);
    let mut sa: SelfAttentionBlock<f64> = SelfAttentionBlock::new("sa", 6, &mut r).unwrap();
    randomize(&mut sa, 9);
    let (c, h, w) = (6, 3, 4);
    let hw = h * w;
    let xdata = rand_vec(&mut r, c * hw);
    let mut perm: Vec<usize> = (0..hw).collect();
    for i in (1..hw).rev() {
        perm.swap(i, r.gen_range(0..=i));
    }
    let mut permuted = vec![0.0f64; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            permuted[ch * hw + p] = xdata[ch * hw + perm[p]];
        }
    }
    let ctx = Forward::new(false);
    let y1 = sa
        .forward(&ctx, &ctx.graph.constant(xdata, &[1, c, h, w]))
        .unwrap()
        .value();
    let y2 = sa
        .forward(&ctx, &ctx.graph.constant(permuted, &[1, c, h, w]))
        .unwrap()
        .value();
    for ch in 0..c {
        for p in 0..hw {
            let a = y1[ch * hw + perm[p]];
            let b = y2[ch * hw + p];
            assert!(
                (a - b).abs() < 1e-9 * a.abs().max(1.0),
                "position-dependent output at channel {ch}, pixel {p}"
            );
        }
    }
}

#[test]
pub fn style_encoder_group_isolation_is_exact() {
    let mut r = rng(10);
    let cfg = EncoderConfig {
        num_classes: 3,
        filters_per_group: 2,
        down_layers: 3,
        up_layers: 2,
        code_dim: 4,
        grouped: true,
        input_mixing: false,
    };
    let mut enc: StyleEncoder<f64> = StyleEncoder::new(cfg.clone(), &mut r).unwrap();
    let img: Vec<f32> = (0..3 * 16 * 16).map(|_| r.gen_range(-0.9..0.9)).collect();
    let mask = random_mask(&mut r, 3, 16, 16);
    let before = enc.encode_styles(&img, &mask).unwrap();
    // perturb every parameter slice belonging to class 1's channel group
    let f = cfg.filters_per_group;
    enc.visit_mut(&mut |p| {
        let per_class = p.numel() / 3;
        let touch = |value: &mut [f64]| {
            for v in value.iter_mut() {
                *v += 0.05;
            }
        };
        if p.name.contains("norm") && p.numel() % 3 == 0 {
            touch(&mut p.value[per_class..2 * per_class]);
        } else if p.name.contains("proj") {
            touch(&mut p.value[per_class..2 * per_class]);
        } else if p.name.contains("stem") || p.name.contains("down") || p.name.contains("up") {
            // conv weights/biases: output rows f..2f belong to class 1
            let rows = p.numel() / (3 * f); // elements per output channel x f
            touch(&mut p.value[f * rows..2 * f * rows]);
        }
    });
    let after = enc.encode_styles(&img, &mask).unwrap();
    assert_eq!(before.row(0), after.row(0), "class-0 row leaked class-1 params");
    assert_ne!(before.row(1), after.row(1), "class-1 row should respond");
    assert_eq!(before.row(2), after.row(2), "class-2 row leaked class-1 params");
}

#[test]
pub fn style_encoder_empty_class_row_is_projection_bias() {
    let mut r = rng(11);
    let cfg = EncoderConfig {
        num_classes: 3,
        filters_per_group: 2,
        down_layers: 3,
        up_layers: 2,
        code_dim: 4,
        grouped: true,
        input_mixing: true,
    };
    let enc: StyleEncoder<f64> = StyleEncoder::new(cfg.clone(), &mut r).unwrap();
    let img: Vec<f32> = (0..3 * 16 * 16).map(|_| r.gen_range(-0.9..0.9)).collect();
    // class 2 absent everywhere
    let mask = random_mask(&mut r, 2, 16, 16);
    let idx = mask.to_indices();
    let mask = SemanticMask::from_indices(&idx, 3, 16, 16).unwrap();
    let styles = enc.encode_styles(&img, &mask).unwrap();
    let mut expected = Vec::new();
    enc.visit(&mut |p| {
        if p.name.contains("proj") && p.name.ends_with(".bias") {
            expected.extend_from_slice(&p.value[2 * cfg.code_dim..3 * cfg.code_dim]);
        }
    });
    assert_eq!(styles.row(2), &expected[..], "empty-class row is not the bias");
}

#[test]
pub fn discriminator_scale_branch_is_compositional() {
    let mut r = rng(12);
    let cfg = semsynth::adversarial::DiscriminatorConfig {
        num_classes: 2,
        num_scales: 2,
        base_width: 4,
        num_layers: 2,
    };
    let disc: Discriminator<f64> = Discriminator::new(cfg, &mut r);
    let mask = random_mask(&mut r, 2, 32, 32);
    let ctx = Forward::new(false);
    let img = ctx.graph.constant(rand_vec(&mut r, 3 * 32 * 32), &[1, 3, 32, 32]);
    let full = disc.forward(&ctx, &img, &[&mask]).unwrap();

    let mt = masks_to_batch(&ctx.graph, &[&mask]);
    let pooled = concat(&[&img, &mt], 1).unwrap().avgpool2x().unwrap();
    let standalone = disc.branch_forward(&ctx, 1, &pooled).unwrap();
    assert_eq!(full.scales[1].score.value(), standalone.score.value());
}

#[test]
pub fn generator_attention_stack_row_stochastic() {
    let config = RunConfig::desk();
    let models: Models<f32> = Models::new(config.clone()).unwrap();
    let mut r = rng(13);
    let mask = random_mask(&mut r, config.num_classes, 64, 64);
    let styles = semsynth::style_encoder::StyleCodes::new(
        (0..config.num_classes * config.style_width())
            .map(|_| r.gen_range(-0.5..0.5))
            .collect(),
        config.num_classes,
        config.style_width(),
    )
    .unwrap();
    let sample = models.generate(&mask, &styles, None).unwrap();
    assert_eq!(sample.attention_stack.len(), 3);
    for maps in &sample.attention_stack {
        let s = maps.shape().to_vec();
        let (heads, c, hw) = (s[1], s[2], s[3] * s[4]);
        let v = maps.value();
        for h in 0..heads {
            for p in 0..hw {
                let sum: f32 = (0..c).map(|j| v[(h * c + j) * hw + p]).sum();
                assert!((sum - 1.0).abs() < 1e-5, "class sum {sum}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_resize_stays_one_hot(
        seed in 0u64..1000,
        c in 2usize..5,
        src in 2usize..12,
        dst in 1usize..12,
    ) {
        let mut r = rng(seed);
        let m = random_mask(&mut r, c, src, src);
        let resized = m.resize(dst, dst);
        // re-validating through the constructor enforces one-hot
        prop_assert!(SemanticMask::new(resized.data().to_vec(), c, dst, dst).is_ok());
        prop_assert_eq!(resized.class_counts().iter().sum::<usize>(), dst * dst);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, b in 1usize..3, m in 1usize..5, n in 1usize..5) {
        let mut r = rng(seed);
        let g = Graph::<f64>::new();
        let x = g.constant(rand_vec(&mut r, b * m * n), &[b, m, n]);
        let y = x.softmax(2).unwrap().value();
        for row in y.chunks(n) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
