//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. The training criteria run two short
//! desk-scale runs (identical except for the attention-loss weight), then a
//! diversity phase on the first.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use semsynth::checkpoint::Checkpoint;
use semsynth::config::RunConfig;
use semsynth::data::generate_scene;
use semsynth::editing::{interpolate_shape, reconstruct, transfer_shape, transfer_style};
use semsynth::mask::SemanticMask;
use semsynth::metrics::{frechet_distance, mean_l1};
use semsynth::model::{generator_hash, Models};
use semsynth::style_encoder::StyleCodes;
use semsynth::train::{descriptor, evaluate, train, train_diversity, TrainResult};
use semsynth::verify;

#[path = "oracle_ops.rs"]
mod oracle_ops;
#[path = "invariants.rs"]
mod invariants;
#[path = "shapes_full.rs"]
mod shapes_full;

// Desk-scale training recipe shared by both runs. The attention weight stays
// at its default of 1 (the ablation run zeroes it); the learning rate, the
// other loss weights and the discriminator width are rebalanced so the short
// truncated epochs converge on one CPU core: a narrow discriminator keeps the
// adversarial gradient from drowning the attention objective.
const EPOCHS: usize = 26;
const STEPS_PER_EPOCH: usize = 100;

fn recipe() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.epochs = EPOCHS;
    cfg.learning_rate = 2e-3;
    cfg.lambda_perceptual = 30.0;
    cfg.lambda_feat_match = 1.0;
    cfg.disc_base_width = 4;
    cfg
}

fn check(name: &str, f: impl FnOnce() -> Result<String, String>) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let (ok, detail) = match outcome {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, msg.lines().next().unwrap_or("panic").to_string())
        }
    };
    println!(
        "criterion {name}: {} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn all_pass(parts: &[(&str, &dyn Fn())]) -> Result<String, String> {
    for (label, f) in parts {
        catch_unwind(AssertUnwindSafe(f)).map_err(|_| format!("{label} failed"))?;
    }
    Ok(format!("{} checks", parts.len()))
}

/// Mean per-pixel color change of `b` vs `a` inside and outside the pixels
/// where any of `classes` is active in `mask`.
fn region_change(
    a: &[f32],
    b: &[f32],
    mask: &SemanticMask,
    classes: &[usize],
) -> (f64, f64) {
    let hw = mask.height() * mask.width();
    let (mut ins, mut outs) = ((0.0, 0usize), (0.0, 0usize));
    for p in 0..hw {
        let inside = classes.iter().any(|&j| mask.channel(j)[p] == 1.0);
        let d: f64 = (0..3)
            .map(|ch| (a[ch * hw + p] as f64 - b[ch * hw + p] as f64).abs())
            .sum::<f64>()
            / 3.0;
        let acc = if inside { &mut ins } else { &mut outs };
        acc.0 += d;
        acc.1 += 1;
    }
    (ins.0 / ins.1.max(1) as f64, outs.0 / outs.1.max(1) as f64)
}

#[test]
fn acceptance_criteria() {
    let mut ok = true;

    // 1. gradient suite: FD checks for every op and composite block
    ok &= check("1 gradient suite", || {
        let start = Instant::now();
        let reports = verify::run_all().map_err(|e| e.to_string())?;
        let worst = reports
            .iter()
            .map(|r| r.max_relative_error)
            .fold(0.0f64, f64::max);
        let secs = start.elapsed().as_secs_f64();
        if reports.iter().all(|r| r.passed) && worst < 1e-4 && secs < 300.0 {
            Ok(format!(
                "{} blocks, max rel err {worst:.2e}, {secs:.1}s",
                reports.len()
            ))
        } else {
            Err(format!("max rel err {worst:.2e}, {secs:.1}s"))
        }
    });

    // 2. scalar-loop oracle equivalence at 1e-6 over >=100 instances each
    ok &= check("2 oracle equivalence", || {
        all_pass(&[
            ("conv2d", &oracle_ops::conv2d_matches_quadruple_loop),
            ("group_norm", &oracle_ops::group_norm_matches_loop),
            ("masked_average_pool", &oracle_ops::masked_average_pool_matches_loop),
            ("attention", &oracle_ops::attention_map_and_attend_match_loop),
            ("attention_loss", &oracle_ops::attention_loss_matches_bce_loop),
            ("hinge", &oracle_ops::hinge_losses_match_loop),
            ("feature_matching", &oracle_ops::feature_matching_matches_loop),
            ("diversity", &oracle_ops::diversity_loss_matches_loop),
        ])
    });

    // 3. structural invariants
    ok &= check("3 structural invariants", || {
        all_pass(&[
            ("row stochastic", &invariants::cross_attention_maps_row_stochastic_over_classes),
            ("conv groups", &invariants::conv_group_isolation_is_exact),
            ("embedder jacobian", &invariants::mask_embedder_cross_channel_jacobian_zero),
            ("mapping jacobian", &invariants::mapping_cross_branch_jacobian_zero),
            ("attention identity", &invariants::zero_init_attention_blocks_are_identities),
            ("encoder groups", &invariants::style_encoder_group_isolation_is_exact),
            ("generator stack", &invariants::generator_attention_stack_row_stochastic),
        ])
    });

    // 4. shape contracts at the full 19-class 256x256 configuration
    ok &= check("4 shape contracts", || {
        all_pass(&[("full configuration", &shapes_full::full_configuration_contracts)])
    });

    // 5. desk-scale training: two runs differing only in the attention weight
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let run_att: TrainResult<f32> = train(
        recipe(),
        Some(&dir.path().join("att")),
        Some(STEPS_PER_EPOCH),
    )
    .unwrap();
    let mut cfg_no = recipe();
    cfg_no.no_attention_loss = true;
    let run_no: TrainResult<f32> =
        train(cfg_no, Some(&dir.path().join("no_att")), Some(STEPS_PER_EPOCH)).unwrap();
    let train_secs = start.elapsed().as_secs_f64();

    ok &= check("5a reconstruction L1 drop", || {
        assert!(EPOCHS <= 30, "epoch budget");
        let first = run_att.records.first().unwrap().recon_l1;
        let last = run_att.records.last().unwrap().recon_l1;
        if train_secs < 3600.0 && last <= 0.5 * first {
            Ok(format!(
                "epoch 1: {first:.3}, epoch {EPOCHS}: {last:.3}, both runs {train_secs:.0}s"
            ))
        } else {
            Err(format!(
                "epoch 1: {first:.3}, epoch {EPOCHS}: {last:.3}, both runs {train_secs:.0}s"
            ))
        }
    });

    let eval_att = evaluate(&run_att.models, 24).unwrap();
    let eval_no = evaluate(&run_no.models, 24).unwrap();
    ok &= check("5b attention IoU gap", || {
        let a = eval_att.attention_iou.unwrap_or(0.0);
        let b = eval_no.attention_iou.unwrap_or(0.0);
        if a - b >= 0.15 {
            Ok(format!("IoU {a:.3} vs {b:.3}"))
        } else {
            Err(format!("IoU {a:.3} vs {b:.3}"))
        }
    });

    let models = &run_att.models;
    let cfg = &models.config;
    let test0 = cfg.train_scenes as u64;
    let scene = |i: u64| generate_scene(&cfg.scene_config(), i).unwrap();

    ok &= check("5c style-transfer locality", || {
        let (mut ins, mut outs, mut used) = (0.0, 0.0, 0);
        for i in 0..6 {
            let target = scene(test0 + i);
            let reference = scene(test0 + 50 + i);
            // edit the first foreground class with a real footprint both
            // inside and outside
            let counts = target.mask.class_counts();
            let hw = counts.iter().sum::<usize>();
            let Some(j) = (1..cfg.num_classes).find(|&j| counts[j] >= 64 && counts[j] <= hw - 64)
            else {
                continue;
            };
            let base = reconstruct(models, &target.image, &target.mask).unwrap();
            let edited = transfer_style(
                models,
                &target.image,
                &target.mask,
                &reference.image,
                &reference.mask,
                &[j],
            )
            .unwrap();
            let (i_chg, o_chg) = region_change(
                &Models::image_f32(&base),
                &Models::image_f32(&edited),
                &target.mask,
                &[j],
            );
            ins += i_chg;
            outs += o_chg;
            used += 1;
        }
        assert!(used >= 4, "not enough editable scenes");
        if outs < 0.5 * ins {
            Ok(format!("outside {outs:.4} < 0.5 x inside {ins:.4} over {used} scenes"))
        } else {
            Err(format!("outside {outs:.4} vs inside {ins:.4} over {used} scenes"))
        }
    });

    // 6. shape-edit stability of the frozen-feature Frechet distance
    ok &= check("6 shape-edit stability", || {
        let n = 48u64;
        let (mut real, mut rec, mut edited) = (vec![], vec![], vec![]);
        for i in 0..n {
            let pair = scene(test0 + i);
            let other = scene(test0 + (i + 7) % n);
            let r = reconstruct(models, &pair.image, &pair.mask).unwrap();
            let e = transfer_shape(models, &pair.image, &pair.mask, &other.mask, &[1])
                .unwrap();
            real.push(descriptor(models, &pair.image, cfg.resolution).unwrap());
            rec.push(descriptor(models, &Models::image_f32(&r), cfg.resolution).unwrap());
            edited.push(descriptor(models, &Models::image_f32(&e), cfg.resolution).unwrap());
        }
        let d_rec = frechet_distance(&real, &rec).unwrap();
        let d_edit = frechet_distance(&real, &edited).unwrap();
        let rel = (d_rec - d_edit).abs() / d_rec;
        if rel < 0.2 {
            Ok(format!("FFD {d_rec:.3} vs {d_edit:.3}, rel diff {rel:.3}"))
        } else {
            Err(format!("FFD {d_rec:.3} vs {d_edit:.3}, rel diff {rel:.3}"))
        }
    });

    // 7. diversity phase on the frozen generator
    let mut div_models = Models::from_checkpoint(&run_att.models.to_checkpoint()).unwrap();
    let hash_before = generator_hash(&div_models);
    train_diversity(&mut div_models, 4, None, Some(100)).unwrap();
    ok &= check("7 diversity phase", || {
        assert_eq!(generator_hash(&div_models), hash_before, "generator not frozen");
        let mapping = div_models.mapping.as_ref().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(424242);
        let mut draw = || -> StyleCodes<f32> {
            let z: Vec<f32> = (0..512)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            StyleCodes::new(
                mapping.map_noise(&z).unwrap(),
                cfg.num_classes,
                cfg.style_width(),
            )
            .unwrap()
        };
        let styles1 = draw();
        let styles2 = draw();
        let (mut l1_sum, mut frozen_sum, mut moved_sum) = (0.0f64, 0.0, 0.0);
        for i in 0..4u64 {
            let pair = scene(test0 + i);
            let img = |s: &StyleCodes<f32>| {
                Models::image_f32(&div_models.generate(&pair.mask, s, None).unwrap())
            };
            let img1 = img(&styles1);
            l1_sum += mean_l1(&img1, &img(&styles2)) as f64;

            // resample one class at a time, freezing the rest: only the
            // resampled class's region may move
            for resample in 0..cfg.num_classes {
                let mut hybrid = styles1.clone();
                hybrid.replace_row(resample, &styles2);
                let (moved, frozen) =
                    region_change(&img1, &img(&hybrid), &pair.mask, &[resample]);
                frozen_sum += frozen;
                moved_sum += moved;
            }
        }
        let l1 = l1_sum / 4.0;
        assert!(l1 > 0.05, "two noise draws too similar: L1 {l1:.4}");
        if frozen_sum < 0.5 * moved_sum {
            Ok(format!(
                "noise L1 {l1:.3}; frozen regions {frozen_sum:.4} < 0.5 x resampled {moved_sum:.4}"
            ))
        } else {
            Err(format!(
                "noise L1 {l1:.3}; frozen regions {frozen_sum:.4} vs resampled {moved_sum:.4}"
            ))
        }
    });

    // 8. exactness: interpolation endpoints, checkpoint round trip, and a
    // reproducible fixed-seed trajectory
    ok &= check("8 exactness and reproducibility", || {
        let pair = scene(test0);
        let other = scene(test0 + 1);
        let classes = [1, 2];
        let at = |alpha: f64| {
            interpolate_shape(models, &pair.image, &pair.mask, &other.mask, &classes, alpha)
                .unwrap()
                .image
                .value()
        };
        let recon = reconstruct(models, &pair.image, &pair.mask).unwrap().image.value();
        let swapped = transfer_shape(models, &pair.image, &pair.mask, &other.mask, &classes)
            .unwrap()
            .image
            .value();
        assert_eq!(at(1.0), recon, "alpha=1 endpoint not bitwise");
        assert_eq!(at(0.0), swapped, "alpha=0 endpoint not bitwise");

        let ckpt = models.to_checkpoint();
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ckpt, "checkpoint round trip not bitwise");
        let reloaded = Models::<f32>::from_checkpoint(&back).unwrap();
        assert_eq!(
            generator_hash(&reloaded),
            generator_hash(models),
            "reloaded parameters differ"
        );

        let mut traj_cfg = RunConfig::desk();
        traj_cfg.epochs = 1;
        let t1: TrainResult<f32> = train(traj_cfg.clone(), None, Some(10)).unwrap();
        let t2: TrainResult<f32> = train(traj_cfg, None, Some(10)).unwrap();
        let (a, b) = (
            t1.records.last().unwrap().losses.weighted_total,
            t2.records.last().unwrap().losses.weighted_total,
        );
        let rel = (a - b).abs() / a.abs().max(1e-12);
        assert!(rel <= 1e-5, "trajectory losses diverge: rel {rel:.2e}");
        assert_eq!(
            generator_hash(&t1.models),
            generator_hash(&t2.models),
            "trajectory parameters diverge"
        );
        Ok("endpoints bitwise, checkpoint bitwise, 10-step trajectory identical".into())
    });

    assert!(ok, "one or more acceptance criteria failed");
}
