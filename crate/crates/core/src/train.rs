//! Training loops: the reconstruction phase (encoder + embedder + generator
//! against a multi-scale discriminator) and the diversity phase (mapping
//! network against a fresh discriminator with the generator frozen).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    attention_loss, feature_matching_loss, generator_total, hinge_losses, perceptual_loss,
    Discriminator, LossBundle,
};
use crate::config::RunConfig;
use crate::data::{generate_scene, ScenePair};
use crate::diversity::{diversity_loss, masked_l1};
use crate::error::{Error, Result};
use crate::mask::SemanticMask;
use crate::metrics::{attention_iou, frechet_distance, iou_threshold, mean_l1, psnr};
use crate::model::{generator_hash, Models};
use crate::nn::{Adam, Forward, ParamSet};
use crate::tensor::{concat, Scalar, Tensor};

/// One epoch of averaged loss terms plus the attention IoU probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBundle,
    pub recon_l1: f64,
    pub attention_iou: Option<f64>,
    pub terms: Vec<String>,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityEpochRecord {
    pub epoch: usize,
    pub adv_g: f64,
    pub adv_d: f64,
    pub diversity: f64,
    pub terms: Vec<String>,
    pub config_hash: String,
}

/// Evaluation summary over a test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub samples: usize,
    pub mean_l1: f64,
    pub psnr: f64,
    /// Frechet distance over frozen random features; not FID.
    pub frozen_feature_frechet: f64,
    pub attention_iou: Option<f64>,
    pub config_hash: String,
}

fn finite(name: &str, t: &Tensor<impl Scalar>) -> Result<f64> {
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss term {name}")));
    }
    Ok(v)
}

fn batch_image<E: Scalar>(ctx: &Forward<E>, pairs: &[&ScenePair], r: usize) -> Tensor<E> {
    let mut data = Vec::with_capacity(pairs.len() * 3 * r * r);
    for p in pairs {
        data.extend(p.image.iter().map(|&v| E::from_f32(v)));
    }
    ctx.graph.constant(data, &[pairs.len(), 3, r, r])
}

/// Losses of one generator step, as graph tensors plus the generated image.
struct GStep<E: Scalar> {
    total: Tensor<E>,
    bundle: LossBundle,
    fake: Vec<E>,
    iou: Option<f64>,
    recon_l1: f64,
}

fn generator_step<E: Scalar>(
    models: &Models<E>,
    disc: &Discriminator<E>,
    pairs: &[&ScenePair],
    with_iou: bool,
) -> Result<(Forward<E>, GStep<E>)> {
    let cfg = &models.config;
    let r = cfg.resolution;
    let masks: Vec<&SemanticMask> = pairs.iter().map(|p| &p.mask).collect();
    let ctx = Forward::new(true);
    let frozen = ctx.view(false);

    let real = batch_image(&ctx, pairs, r);
    let styles = models.encoder.forward(&ctx, &real, &masks)?;
    let embedding = if cfg.no_mask_embedder {
        None
    } else {
        Some(models.embedder.forward(&ctx, &masks)?)
    };
    let sample = models
        .generator
        .forward(&ctx, &masks, &styles, embedding.as_ref())?;

    let d_fake = disc.forward(&frozen, &sample.image, &masks)?;
    let d_real = disc.forward(&frozen, &real, &masks)?;
    let (_, adv_g) = hinge_losses(&d_real, &d_fake)?;
    let fm = feature_matching_loss(&d_real, &d_fake)?;
    let perc = perceptual_loss(&models.pyramid, &ctx, &sample.image, &real)?;
    let att = if sample.attention_stack.is_empty() {
        None
    } else {
        Some(attention_loss(&sample.attention_stack, &masks)?)
    };
    let weights = cfg.loss_weights();
    let total = generator_total(&adv_g, &fm, &perc, att.as_ref(), &weights)?;

    let bundle = LossBundle {
        adv_g: finite("adv_g", &adv_g)?,
        adv_d: 0.0,
        feat_match: finite("feat_match", &fm)?,
        perceptual: finite("perceptual", &perc)?,
        attention: att.as_ref().map(|t| finite("attention", t)).transpose()?,
        weighted_total: finite("weighted_total", &total)?,
        weights,
    };

    let fake = sample.image.value();
    let recon_l1 = {
        let rv = real.value();
        fake.iter()
            .zip(&rv)
            .map(|(a, b)| (a.into_f64() - b.into_f64()).abs())
            .sum::<f64>()
            / fake.len() as f64
    };
    let iou = if with_iou && !sample.attention_stack.is_empty() {
        Some(stack_iou(&sample.attention_stack, &masks, cfg.num_classes)?)
    } else {
        None
    };
    Ok((
        ctx,
        GStep {
            total,
            bundle,
            fake,
            iou,
            recon_l1,
        },
    ))
}

/// Mean IoU across classes, heads, layers and batch samples.
fn stack_iou<E: Scalar>(
    stack: &[Tensor<E>],
    masks: &[&SemanticMask],
    num_classes: usize,
) -> Result<f64> {
    let thr = iou_threshold(num_classes);
    let mut acc = 0.0;
    let mut count = 0usize;
    for maps in stack {
        let s = maps.shape().to_vec();
        let (n, heads) = (s[0], s[1]);
        let per = maps.numel() / n;
        let vals = maps.value();
        for (i, mask) in masks.iter().enumerate().take(n) {
            let sample: Vec<f64> = vals[i * per..(i + 1) * per].iter().map(|v| v.into_f64()).collect();
            let ious = attention_iou(&sample, heads, mask, thr)?;
            acc += ious.iter().sum::<f64>();
            count += ious.len();
        }
    }
    Ok(acc / count.max(1) as f64)
}

fn discriminator_step<E: Scalar>(
    models: &Models<E>,
    disc: &Discriminator<E>,
    pairs: &[&ScenePair],
    fake: &[E],
) -> Result<(Forward<E>, Tensor<E>, f64)> {
    let cfg = &models.config;
    let r = cfg.resolution;
    let masks: Vec<&SemanticMask> = pairs.iter().map(|p| &p.mask).collect();
    let ctx = Forward::new(true);
    let real = batch_image(&ctx, pairs, r);
    let fake_t = ctx.graph.constant(fake.to_vec(), &[pairs.len(), 3, r, r]);
    let d_real = disc.forward(&ctx, &real, &masks)?;
    let d_fake = disc.forward(&ctx, &fake_t, &masks)?;
    let (adv_d, _) = hinge_losses(&d_real, &d_fake)?;
    let v = finite("adv_d", &adv_d)?;
    Ok((ctx, adv_d, v))
}

fn apply_grads<E: Scalar>(
    ctx: &Forward<E>,
    adam: &mut Adam<E>,
    models: &mut [&mut dyn ParamSet<E>],
) -> Result<()> {
    let grads = ctx.grads()?;
    for m in models.iter_mut() {
        adam.apply(&mut **m, &grads);
    }
    Ok(())
}

fn epoch_indices(seed: u64, epoch: usize, len: usize) -> Vec<u64> {
    let mut idx: Vec<u64> = (0..len as u64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E3779B9));
    idx.shuffle(&mut rng);
    idx
}

pub struct TrainResult<E: Scalar> {
    pub models: Models<E>,
    pub discriminator: Discriminator<E>,
    pub records: Vec<EpochRecord>,
}

/// Reconstruction-phase training. Writes one JSON line per epoch into
/// `run_dir/metrics.jsonl` when a run directory is given, plus a final
/// checkpoint. `max_steps` truncates each epoch (used by trajectory tests).
pub fn train<E: Scalar>(
    config: RunConfig,
    run_dir: Option<&Path>,
    max_steps: Option<usize>,
) -> Result<TrainResult<E>> {
    config.validate()?;
    let mut models: Models<E> = Models::new(config.clone())?;
    let mut disc_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x64697363));
    let mut disc: Discriminator<E> =
        Discriminator::new(config.discriminator_config(), &mut disc_rng);
    let mut adam_g = Adam::new(config.learning_rate, config.beta1, config.beta2);
    let mut adam_d = Adam::new(config.learning_rate, config.beta1, config.beta2);
    let scene_cfg = config.scene_config();
    let hash = format!("{:016x}", config.hash());

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), config.to_json())?;
    }

    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_indices(config.seed, epoch, config.train_scenes);
        let mut sums = LossAccum::default();
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if let Some(m) = max_steps {
                if steps >= m {
                    break;
                }
            }
            let pairs: Vec<ScenePair> = chunk
                .iter()
                .map(|&i| generate_scene(&scene_cfg, i))
                .collect::<Result<_>>()?;
            let refs: Vec<&ScenePair> = pairs.iter().collect();

            let last = steps + 1 == max_steps.unwrap_or(usize::MAX)
                || (steps + 1) * config.batch_size >= config.train_scenes;
            let (g_ctx, g) = generator_step(&models, &disc, &refs, last)?;
            g.total.backward()?;
            apply_grads(
                &g_ctx,
                &mut adam_g,
                &mut [
                    &mut models.encoder as &mut dyn ParamSet<E>,
                    &mut models.embedder,
                    &mut models.generator,
                ],
            )?;

            let (d_ctx, adv_d, adv_d_v) = discriminator_step(&models, &disc, &refs, &g.fake)?;
            adv_d.backward()?;
            apply_grads(&d_ctx, &mut adam_d, &mut [&mut disc as &mut dyn ParamSet<E>])?;

            sums.push(&g, adv_d_v);
            steps += 1;
        }
        let record = sums.finish(epoch + 1, &config, &hash);
        if let Some(dir) = run_dir {
            append_jsonl(&dir.join("metrics.jsonl"), &record)?;
        }
        records.push(record);
    }

    if let Some(dir) = run_dir {
        models.to_checkpoint().save(&dir.join("model.ckpt"))?;
    }
    Ok(TrainResult {
        models,
        discriminator: disc,
        records,
    })
}

#[derive(Default)]
struct LossAccum {
    adv_g: f64,
    adv_d: f64,
    fm: f64,
    perc: f64,
    att: f64,
    att_n: usize,
    total: f64,
    recon_l1: f64,
    n: usize,
    iou: Option<f64>,
}

impl LossAccum {
    fn push(&mut self, g: &GStep<impl Scalar>, adv_d: f64) {
        self.adv_g += g.bundle.adv_g;
        self.adv_d += adv_d;
        self.fm += g.bundle.feat_match;
        self.perc += g.bundle.perceptual;
        if let Some(a) = g.bundle.attention {
            self.att += a;
            self.att_n += 1;
        }
        self.total += g.bundle.weighted_total;
        self.recon_l1 += g.recon_l1;
        self.n += 1;
        if g.iou.is_some() {
            self.iou = g.iou;
        }
    }

    fn finish(&self, epoch: usize, config: &RunConfig, hash: &str) -> EpochRecord {
        let n = self.n.max(1) as f64;
        let weights = config.loss_weights();
        let mut terms = vec![
            "adv_g".to_string(),
            "feat_match".to_string(),
            "perceptual".to_string(),
        ];
        let attention = if self.att_n > 0 && weights.attention != 0.0 {
            terms.push("attention".to_string());
            Some(self.att / self.att_n as f64)
        } else {
            None
        };
        EpochRecord {
            epoch,
            losses: LossBundle {
                adv_g: self.adv_g / n,
                adv_d: self.adv_d / n,
                feat_match: self.fm / n,
                perceptual: self.perc / n,
                attention,
                weighted_total: self.total / n,
                weights,
            },
            recon_l1: self.recon_l1 / n,
            attention_iou: self.iou,
            terms,
            config_hash: hash.to_string(),
        }
    }
}

fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

/// Diversity-phase training: the generator (and the conditioning models) are
/// frozen bitwise; only the mapping network and a fresh discriminator learn,
/// from exactly two losses: adversarial and diversity.
/// Training scenes encoded into the style-code bank at the start of the
/// diversity phase.
pub const STYLE_STATS_SCENES: usize = 128;

/// Bank samples drawn per step for the code-distribution MMD term.
const MMD_BANK_BATCH: usize = 8;

/// Mean-L1 movement wanted inside a resampled class's region, beyond which
/// the hybrid separation term stops rewarding further spread.
const SEPARATION_TARGET: f64 = 0.15;

/// Columns `j*w .. (j+1)*w` of a `[m, c*w]` tensor, as `[m, w]`.
fn slice_rows<E: Scalar>(x: &Tensor<E>, j: usize, c: usize, w: usize) -> Result<Tensor<E>> {
    let g = x.graph();
    let mut sel = vec![E::zero(); w * c * w];
    for d in 0..w {
        sel[d * (c * w) + j * w + d] = E::one();
    }
    x.linear(&g.constant(sel, &[w, c * w]), None)
}

pub fn train_diversity<E: Scalar>(
    models: &mut Models<E>,
    epochs: usize,
    run_dir: Option<&Path>,
    max_steps: Option<usize>,
) -> Result<Vec<DiversityEpochRecord>> {
    let config = models.config.clone();
    if models.mapping.is_none() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x6d61_7070));
        models.mapping = Some(crate::diversity::MappingNetwork::new(
            config.mapping_config(),
            &mut rng,
        )?);
    }
    let frozen_hash = generator_hash(models);

    // A bank of style codes from the trained encoder. The mapping's output
    // distribution is pulled onto these samples with a quadratic-kernel MMD,
    // which matches means and covariances, so noise draws land in the code
    // distribution the frozen generator was trained on. That is what makes
    // resampling both visibly diverse and spatially local; an unconstrained
    // separation reward instead blows up the code scale until the output
    // tanh saturates, and per-dimension moment matching alone produces
    // off-manifold codes that render garishly and bleed across regions.
    let scene_cfg = config.scene_config();
    let stats_scenes = STYLE_STATS_SCENES.min(config.train_scenes);
    let code_len = config.num_classes * config.style_width();
    let mut bank: Vec<Vec<E>> = Vec::with_capacity(stats_scenes);
    for i in 0..stats_scenes {
        let pair = generate_scene(&scene_cfg, i as u64)?;
        let codes = models.encoder.encode_styles(&pair.image, &pair.mask)?;
        bank.push(codes.values);
    }

    let mut disc_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x6476_6473));
    let mut disc: Discriminator<E> =
        Discriminator::new(config.discriminator_config(), &mut disc_rng);
    let mut adam_m = Adam::new(config.learning_rate, config.beta1, config.beta2);
    let mut adam_d = Adam::new(config.learning_rate, config.beta1, config.beta2);
    let hash = format!("{:016x}", config.hash());
    let noise_dim = config.mapping_config().noise_dim;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x6e6f_6973));

    let mut records = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = epoch_indices(config.seed.wrapping_add(1), epoch, config.train_scenes);
        let (mut s_adv_g, mut s_adv_d, mut s_div, mut n) = (0.0, 0.0, 0.0, 0usize);
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if let Some(m) = max_steps {
                if steps >= m {
                    break;
                }
            }
            let pairs: Vec<ScenePair> = chunk
                .iter()
                .map(|&i| generate_scene(&scene_cfg, i))
                .collect::<Result<_>>()?;
            let refs: Vec<&ScenePair> = pairs.iter().collect();
            let masks: Vec<&SemanticMask> = refs.iter().map(|p| &p.mask).collect();
            let nb = refs.len();

            let ctx = Forward::new(true);
            let frozen = ctx.view(false);
            let mapping = models.mapping.as_ref().unwrap();
            let z: Vec<Vec<E>> = (0..2)
                .map(|_| {
                    (0..nb * noise_dim)
                        .map(|_| E::from_f64(noise_rng.sample::<f64, _>(StandardNormal)))
                        .collect()
                })
                .collect();
            let z1 = ctx.graph.constant(z[0].clone(), &[nb, noise_dim]);
            let z2 = ctx.graph.constant(z[1].clone(), &[nb, noise_dim]);
            let styles1 = mapping.forward(&ctx, &z1)?;
            let styles2 = mapping.forward(&ctx, &z2)?;
            let embedding = if config.no_mask_embedder {
                None
            } else {
                Some(models.embedder.forward(&frozen, &masks)?)
            };
            let img1 = models
                .generator
                .forward(&frozen, &masks, &styles1, embedding.as_ref())?
                .image;
            let img2 = models
                .generator
                .forward(&frozen, &masks, &styles2, embedding.as_ref())?
                .image;

            // Quadratic-kernel MMD between the mapped codes of both draws
            // and a fresh sample from the encoder code bank.
            let x = concat(&[&styles1, &styles2], 0)?.reshape(&[2 * nb, code_len])?;
            let mut ybuf = Vec::with_capacity(MMD_BANK_BATCH * code_len);
            for _ in 0..MMD_BANK_BATCH {
                ybuf.extend_from_slice(&bank[noise_rng.gen_range(0..stats_scenes)]);
            }
            let y = ctx.graph.constant(ybuf, &[MMD_BANK_BATCH, code_len]);
            let kq = |a: &Tensor<E>, b: &Tensor<E>| -> Result<Tensor<E>> {
                let k = a
                    .linear(b, None)?
                    .scale(E::from_f64(1.0 / code_len as f64))
                    .add_scalar(E::one());
                Ok(k.mul(&k)?.mean_all())
            };
            let mut moment = kq(&x, &x)?
                .add(&kq(&y, &y)?)?
                .sub(&kq(&x, &y)?.scale(E::from_f64(2.0)))?;
            // The same match per class row: the joint kernel constrains the
            // scene-level covariance, the per-class kernels each class's own
            // code distribution.
            let w = config.style_width();
            for j in 0..config.num_classes {
                let xj = slice_rows(&x, j, config.num_classes, w)?;
                let yj = slice_rows(&y, j, config.num_classes, w)?;
                let kqj = |a: &Tensor<E>, b: &Tensor<E>| -> Result<Tensor<E>> {
                    let k = a
                        .linear(b, None)?
                        .scale(E::from_f64(1.0 / w as f64))
                        .add_scalar(E::one());
                    Ok(k.mul(&k)?.mean_all())
                };
                let mj = kqj(&xj, &xj)?
                    .add(&kqj(&yj, &yj)?)?
                    .sub(&kqj(&xj, &yj)?.scale(E::from_f64(2.0)))?;
                moment = moment.add(&mj.scale(E::from_f64(1.0 / config.num_classes as f64)))?;
            }

            let real = batch_image(&ctx, &refs, config.resolution);
            let d_fake = disc.forward(&frozen, &img1, &masks)?;
            let d_real = disc.forward(&frozen, &real, &masks)?;
            let (_, adv_g) = hinge_losses(&d_real, &d_fake)?;
            // Attractor onto the code manifold: pull every mapped sample
            // toward its nearest bank code. The kernel terms above keep the
            // samples spread out, so this cannot collapse onto one point;
            // without it, second-order matching still leaves codes off the
            // curved manifold and their image effect is global instead of
            // per-class.
            let xv = x.value();
            let mut targets = Vec::with_capacity(2 * nb * code_len);
            for s in 0..2 * nb {
                let row = &xv[s * code_len..(s + 1) * code_len];
                let nearest = bank
                    .iter()
                    .min_by(|a, b| {
                        let da: f64 = a
                            .iter()
                            .zip(row)
                            .map(|(p, q)| (p.into_f64() - q.into_f64()).powi(2))
                            .sum();
                        let db: f64 = b
                            .iter()
                            .zip(row)
                            .map(|(p, q)| (p.into_f64() - q.into_f64()).powi(2))
                            .sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                targets.extend_from_slice(nearest);
            }
            let t = ctx.graph.constant(targets, &[2 * nb, code_len]);
            let dx = x.sub(&t)?;
            let snap = dx.mul(&dx)?.mean_all();

            // One class per step is resampled from z2 while the rest are
            // held to z1; the hybrid generation must move inside the
            // resampled class's region and stay put everywhere else.
            let resampled = noise_rng.gen_range(0..config.num_classes);
            let keep: Vec<bool> =
                (0..config.num_classes).map(|j| j != resampled).collect();
            let styles_h = mapping.forward_mixed(&ctx, &z1, &z2, &keep)?;
            let img_h = models
                .generator
                .forward(&frozen, &masks, &styles_h, embedding.as_ref())?
                .image;
            let r = config.resolution;
            let mut w_in = vec![E::zero(); nb * 3 * r * r];
            let mut w_out = vec![E::zero(); nb * 3 * r * r];
            let (mut n_in, mut n_out) = (0usize, 0usize);
            for (i, pair) in refs.iter().enumerate() {
                let moved = pair.mask.channel(resampled);
                for p in 0..r * r {
                    let inside = moved[p] == 1.0;
                    *(if inside { &mut n_in } else { &mut n_out }) += 3;
                    for c in 0..3 {
                        let idx = (i * 3 + c) * r * r + p;
                        if inside {
                            w_in[idx] = E::one();
                        } else {
                            w_out[idx] = E::one();
                        }
                    }
                }
            }
            let shape = [nb, 3, r, r];
            let w_in = ctx.graph.constant(w_in, &shape);
            let w_out = ctx.graph.constant(w_out, &shape);
            let sep_hybrid = masked_l1(&img1, &img_h, &w_in, n_in as f64)?
                .scale(-E::one())
                .add_scalar(E::from_f64(SEPARATION_TARGET))
                .relu();
            let locality = masked_l1(&img1, &img_h, &w_out, n_out as f64)?;

            // Hinged separation between two full draws. The bound and the
            // manifold terms above keep this from blowing up the code scale,
            // which is what an unconstrained separation reward does.
            let div = diversity_loss(&img1, &img2)?;
            let sep_full = div.add_scalar(E::from_f64(SEPARATION_TARGET)).relu();
            let lambda = E::from_f64(config.lambda_diversity);
            let total = adv_g
                .add(&moment.scale(lambda))?
                .add(&snap.scale(lambda))?
                .add(&sep_full.scale(lambda))?
                .add(&sep_hybrid.scale(lambda))?
                .add(&locality.scale(lambda))?;
            s_adv_g += finite("adv_g", &adv_g)?;
            s_div += finite("diversity", &div)?;
            total.backward()?;
            let mapping = models.mapping.as_mut().unwrap();
            apply_grads(&ctx, &mut adam_m, &mut [mapping as &mut dyn ParamSet<E>])?;

            let fake = img1.value();
            let (d_ctx, adv_d, adv_d_v) = discriminator_step(models, &disc, &refs, &fake)?;
            adv_d.backward()?;
            apply_grads(&d_ctx, &mut adam_d, &mut [&mut disc])?;
            s_adv_d += adv_d_v;

            n += 1;
            steps += 1;
        }
        let nf = n.max(1) as f64;
        let record = DiversityEpochRecord {
            epoch: epoch + 1,
            adv_g: s_adv_g / nf,
            adv_d: s_adv_d / nf,
            diversity: s_div / nf,
            terms: vec!["adversarial".to_string(), "diversity".to_string()],
            config_hash: hash.clone(),
        };
        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir)?;
            append_jsonl(&dir.join("metrics_diversity.jsonl"), &record)?;
        }
        records.push(record);
    }

    if generator_hash(models) != frozen_hash {
        return Err(Error::Config(
            "diversity training mutated frozen generator parameters".into(),
        ));
    }
    if let Some(dir) = run_dir {
        models.to_checkpoint().save(&dir.join("model_diversity.ckpt"))?;
    }
    Ok(records)
}

/// Reconstruction metrics over the held-out scene range.
pub fn evaluate<E: Scalar>(models: &Models<E>, samples: usize) -> Result<EvalRecord> {
    let config = &models.config;
    let scene_cfg = config.scene_config();
    let mut l1 = 0.0;
    let mut ps = 0.0;
    let mut iou_acc = 0.0;
    let mut iou_n = 0usize;
    let mut real_desc = Vec::with_capacity(samples);
    let mut fake_desc = Vec::with_capacity(samples);
    for i in 0..samples {
        let idx = (config.train_scenes + i) as u64;
        let pair = generate_scene(&scene_cfg, idx)?;
        let sample = crate::editing::reconstruct(models, &pair.image, &pair.mask)?;
        let fake = Models::image_f32(&sample);
        l1 += mean_l1(&fake, &pair.image);
        ps += psnr(&fake, &pair.image);
        if !sample.attention_stack.is_empty() {
            iou_acc += stack_iou(
                &sample.attention_stack,
                &[&pair.mask],
                config.num_classes,
            )?;
            iou_n += 1;
        }
        real_desc.push(descriptor(models, &pair.image, config.resolution)?);
        fake_desc.push(descriptor(models, &fake, config.resolution)?);
    }
    let n = samples.max(1) as f64;
    Ok(EvalRecord {
        samples,
        mean_l1: l1 / n,
        psnr: ps / n,
        frozen_feature_frechet: frechet_distance(&real_desc, &fake_desc)?,
        attention_iou: (iou_n > 0).then(|| iou_acc / iou_n as f64),
        config_hash: format!("{:016x}", config.hash()),
    })
}

/// Frozen-pyramid descriptor of one image, as f64 values.
pub fn descriptor<E: Scalar>(models: &Models<E>, image: &[f32], r: usize) -> Result<Vec<f64>> {
    let ctx = Forward::new(false);
    let data: Vec<E> = image.iter().map(|&v| E::from_f32(v)).collect();
    let img = ctx.graph.constant(data, &[1, 3, r, r]);
    let d = models.pyramid.descriptor(&ctx, &img)?;
    Ok(d.value().iter().map(|v| v.into_f64()).collect())
}
