//! Model-level behaviors that need no training: embedder algebra, generator
//! determinism and shapes, discriminator geometry, dataset statistics, image
//! round trips, and the editing operations' trivial cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semsynth::attention::AttentionConfig;
use semsynth::config::RunConfig;
use semsynth::data::{
    generate_scene, hue_distance, load_pair, save_dataset, save_image_png, save_mask_png,
    scene_hues, SceneConfig,
};
use semsynth::editing::{interpolate_shape, reconstruct, transfer_shape, transfer_style};
use semsynth::generator::broadcast_class_rows;
use semsynth::mask::SemanticMask;
use semsynth::mask_embedder::{
    interpolate_embeddings, EmbedderConfig, MaskEmbedder, MaskEmbedding, CODE_DIM,
};
use semsynth::metrics::mean_l1;
use semsynth::model::{generator_hash, Models};
use semsynth::nn::{Forward, ParamSet};
use semsynth::tensor::Graph;

fn desk_models() -> Models<f32> {
    Models::new(RunConfig::desk()).unwrap()
}

fn scene(models: &Models<f32>, index: u64) -> (Vec<f32>, SemanticMask) {
    let pair = generate_scene(&models.config.scene_config(), index).unwrap();
    (pair.image, pair.mask)
}

#[test]
fn attention_head_splitting() {
    let c = AttentionConfig::for_dim(128).unwrap();
    assert_eq!((c.num_heads, c.head_dim), (2, 64));
    let c = AttentionConfig::for_dim(32).unwrap();
    assert_eq!(c.num_heads, 1);
    assert!(AttentionConfig::for_dim(96).is_err());
}

#[test]
fn embedder_absent_class_code_is_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = EmbedderConfig {
        num_classes: 3,
        input_h: 8,
        input_w: 8,
    };
    let emb = MaskEmbedder::<f32>::new(cfg, &mut rng);
    // class 2 never appears, so its flattened channel is all zeros
    let idx: Vec<u8> = (0..64).map(|p| (p % 2) as u8).collect();
    let mask = SemanticMask::from_indices(&idx, 3, 8, 8).unwrap();
    let code = emb.embed_mask(&mask).unwrap();
    let mut bias = vec![0.0f32; 0];
    emb.visit(&mut |p| {
        if p.name.ends_with(".bias") {
            bias = p.value.clone();
        }
    });
    assert_eq!(code.code(2), &bias[..]);
}

#[test]
fn embedding_interpolation_algebra() {
    let e1 = MaskEmbedding::new(vec![2.0f64; 2 * CODE_DIM], 2).unwrap();
    let e2 = MaskEmbedding::new(vec![4.0f64; 2 * CODE_DIM], 2).unwrap();
    // midpoint of the selected class only
    let mid = interpolate_embeddings(&e1, &e2, &[1], 0.5).unwrap();
    assert!(mid.code(0).iter().all(|&v| v == 2.0));
    assert!(mid.code(1).iter().all(|&v| v == 3.0));
    // endpoints copy bitwise
    let at1 = interpolate_embeddings(&e1, &e2, &[0, 1], 1.0).unwrap();
    assert_eq!(at1.codes, e1.codes);
    let at0 = interpolate_embeddings(&e1, &e2, &[0, 1], 0.0).unwrap();
    assert_eq!(at0.codes, e2.codes);
    // invalid arguments
    assert!(interpolate_embeddings(&e1, &e2, &[2], 0.5).is_err());
    assert!(interpolate_embeddings(&e1, &e2, &[0], 1.5).is_err());
}

#[test]
fn generator_is_deterministic_with_expected_shapes() {
    let models = desk_models();
    let again = desk_models();
    assert_eq!(generator_hash(&models), generator_hash(&again));

    let (img, mask) = scene(&models, 0);
    let s1 = reconstruct(&models, &img, &mask).unwrap();
    assert_eq!(s1.image.shape(), &[1, 3, 64, 64]);
    assert_eq!(s1.attention_stack.len(), 3);
    for (i, maps) in s1.attention_stack.iter().enumerate() {
        let r = 16 << i;
        assert_eq!(&maps.shape()[2..], &[4, r, r]);
    }
    let v = s1.image.value();
    assert!(v.iter().all(|x| x.is_finite() && (-1.0..=1.0).contains(x)));

    let s2 = reconstruct(&models, &img, &mask).unwrap();
    assert_eq!(s2.image.value(), v);
    let s3 = reconstruct(&again, &img, &mask).unwrap();
    assert_eq!(s3.image.value(), v);
}

#[test]
fn conditioning_ablation_matches_shapes() {
    let mut cfg = RunConfig::desk();
    cfg.set("no_cross_attention", "true").unwrap();
    let models = Models::<f32>::new(cfg).unwrap();
    let (img, mask) = scene(&models, 1);
    let s = reconstruct(&models, &img, &mask).unwrap();
    assert_eq!(s.image.shape(), &[1, 3, 64, 64]);
    assert!(s.attention_stack.is_empty());
}

#[test]
fn broadcast_class_rows_selects_by_class() {
    let g = Graph::<f64>::new();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (c, cw, h, w) = (3, 5, 4, 4);
    let rows: Vec<f64> = (0..c * cw).map(|_| r.gen_range(-1.0..1.0)).collect();
    let rows_t = g.constant(rows.clone(), &[1, c, cw]);
    let idx: Vec<u8> = (0..h * w).map(|_| r.gen_range(0..c as u8)).collect();
    let mask = SemanticMask::from_indices(&idx, c, h, w).unwrap();
    let mask_t = {
        let data: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
        g.constant(data, &[1, c, h * w])
    };
    let out = broadcast_class_rows(&rows_t, &mask_t, 1, cw, h, w).unwrap();
    assert_eq!(out.shape(), &[1, cw, h, w]);
    let v = out.value();
    // each pixel carries exactly its class's row
    for p in 0..h * w {
        let cls = idx[p] as usize;
        for k in 0..cw {
            assert_eq!(v[k * h * w + p], rows[cls * cw + k]);
        }
    }
    // a single-class mask yields a spatially constant field
    let uni = SemanticMask::from_indices(&vec![1u8; h * w], c, h, w).unwrap();
    let uni_t = {
        let data: Vec<f64> = uni.data().iter().map(|&v| v as f64).collect();
        g.constant(data, &[1, c, h * w])
    };
    let v = broadcast_class_rows(&rows_t, &uni_t, 1, cw, h, w).unwrap().value();
    for k in 0..cw {
        assert!(v[k * h * w..(k + 1) * h * w].iter().all(|&x| x == rows[cw + k]));
    }
}

#[test]
fn discriminator_score_geometry() {
    let cfg = RunConfig::desk().discriminator_config();
    // 64 -> 32 -> 16 -> 8 through three stride-2 layers, then -3 from the
    // valid 4x4 scoring conv
    assert_eq!(cfg.score_side(64), 5);
    assert_eq!(cfg.score_side(32), 1);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let disc = semsynth::adversarial::Discriminator::<f32>::new(cfg.clone(), &mut rng);
    let models = desk_models();
    let (img, mask) = scene(&models, 2);
    let ctx = Forward::new(false);
    let img_t = ctx.graph.constant(img.clone(), &[1, 3, 64, 64]);
    let outs = disc.forward(&ctx, &img_t, &[&mask]).unwrap();
    assert_eq!(outs.scales.len(), 2);
    for (s, out) in outs.scales.iter().enumerate() {
        let side = cfg.score_side(64 >> s);
        assert_eq!(out.score.shape(), &[1, 1, side, side]);
        assert_eq!(out.features.len(), cfg.num_layers);
    }
}

#[test]
fn scenes_are_deterministic_and_valid() {
    let cfg = SceneConfig::new(4, 32, 99);
    let a = generate_scene(&cfg, 5).unwrap();
    let b = generate_scene(&cfg, 5).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.mask.data(), b.mask.data());
    let c = generate_scene(&cfg, 6).unwrap();
    assert_ne!(a.image, c.image);
    assert!(a.image.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    // one-hot: every pixel belongs to exactly one class
    let total: usize = a.mask.class_counts().iter().sum();
    assert_eq!(total, 32 * 32);
}

#[test]
fn style_correlation_statistics() {
    let mut linked = SceneConfig::new(4, 8, 321);
    linked.style_correlation = 1.0;
    let mut free = linked.clone();
    free.style_correlation = 0.0;
    let n = 1000;
    let close = |cfg: &SceneConfig| {
        (0..n)
            .filter(|&i| {
                let h = scene_hues(cfg, i as u64);
                hue_distance(h[1], h[2]) <= 0.021
            })
            .count()
    };
    assert_eq!(close(&linked), n, "perfect correlation must always link hues");
    let frac = close(&free) as f64 / n as f64;
    assert!(frac < 0.1, "independent hues land close too often: {frac}");
}

#[test]
fn png_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig::new(3, 16, 4);
    let pair = generate_scene(&cfg, 0).unwrap();
    let img_path = dir.path().join("img.png");
    let mask_path = dir.path().join("mask.png");
    save_image_png(&img_path, &pair.image, 16, 16).unwrap();
    save_mask_png(&mask_path, &pair.mask).unwrap();
    let (img, mask) = load_pair(&img_path, &mask_path, 3).unwrap();
    assert_eq!(mask.data(), pair.mask.data());
    // 8-bit quantization bounds the image error
    assert!(mean_l1(&img, &pair.image) < 1.0 / 255.0);

    // regenerating a dataset reproduces identical files
    let d1 = dir.path().join("d1");
    let d2 = dir.path().join("d2");
    save_dataset(&d1, &cfg, 3).unwrap();
    save_dataset(&d2, &cfg, 3).unwrap();
    for sub in ["images", "masks"] {
        for i in 0..3 {
            let f = format!("{sub}/{i:04}.png");
            assert_eq!(
                std::fs::read(d1.join(&f)).unwrap(),
                std::fs::read(d2.join(&f)).unwrap(),
                "{f} differs between runs"
            );
        }
    }
}

#[test]
fn editing_trivial_cases() {
    let mut models = desk_models();
    // a freshly initialized generator ignores style codes (its attention
    // outputs start at zero), so fill every parameter with noise to make
    // style edits visible
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for m in [
        &mut models.encoder as &mut dyn ParamSet<f32>,
        &mut models.embedder,
        &mut models.generator,
    ] {
        m.visit_mut(&mut |p| {
            for v in p.value.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        });
    }
    let (img, mask) = scene(&models, 3);
    let (ref_img, ref_mask) = scene(&models, 4);
    let recon = reconstruct(&models, &img, &mask).unwrap().image.value();

    // transferring no classes is reconstruction
    let s = transfer_style(&models, &img, &mask, &ref_img, &ref_mask, &[]).unwrap();
    assert_eq!(s.image.value(), recon);
    // shape transfer from the target's own mask is reconstruction
    let s = transfer_shape(&models, &img, &mask, &mask, &[0, 1, 2, 3]).unwrap();
    assert_eq!(s.image.value(), recon);
    // swapping rows out and back is an involution
    let once = transfer_style(&models, &img, &mask, &ref_img, &ref_mask, &[1]).unwrap();
    assert_ne!(once.image.value(), recon);
    let back = transfer_style(&models, &img, &mask, &img, &mask, &[1]).unwrap();
    assert_eq!(back.image.value(), recon);

    // out-of-range class index is rejected
    assert!(transfer_style(&models, &img, &mask, &ref_img, &ref_mask, &[4]).is_err());
}

#[test]
fn evaluation_is_deterministic() {
    let models = desk_models();
    let a = semsynth::train::evaluate(&models, 3).unwrap();
    let b = semsynth::train::evaluate(&models, 3).unwrap();
    assert_eq!(a.mean_l1, b.mean_l1);
    assert_eq!(a.psnr, b.psnr);
    assert_eq!(a.frozen_feature_frechet, b.frozen_feature_frechet);
    assert_eq!(a.attention_iou, b.attention_iou);
    assert_eq!(a.config_hash, b.config_hash);
}

#[test]
fn shape_interpolation_sweep() {
    let models = desk_models();
    let (img, mask1) = scene(&models, 5);
    let (_, mask2) = scene(&models, 6);
    let classes = [1, 2];
    let at = |alpha: f64| {
        interpolate_shape(&models, &img, &mask1, &mask2, &classes, alpha)
            .unwrap()
            .image
            .value()
    };
    // alpha = 1 keeps mask1's embedding: identical to reconstruction
    let recon = reconstruct(&models, &img, &mask1).unwrap().image.value();
    assert_eq!(at(1.0), recon);
    // alpha = 0 swaps in mask2's codes for the selected classes
    let swapped = transfer_shape(&models, &img, &mask1, &mask2, &classes)
        .unwrap()
        .image
        .value();
    assert_eq!(at(0.0), swapped);
    // the sweep moves in small steps between the endpoints
    let total = mean_l1(&recon, &swapped);
    let mut prev = at(0.0);
    for k in 1..=10 {
        let cur = at(k as f64 / 10.0);
        let step = mean_l1(&prev, &cur);
        assert!(
            step <= total * 0.8 + 1e-6,
            "alpha step {k}: jump {step} vs endpoint distance {total}"
        );
        prev = cur;
    }
}
