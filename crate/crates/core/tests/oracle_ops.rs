//! Scalar-loop oracle equivalence for the numerical core: every structured
//! op and loss is compared elementwise against an independent brute-force
//! implementation on at least 100 random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semsynth::adversarial::{
    attention_loss, feature_matching_loss, hinge_losses, DiscriminatorOutputs, ScaleOutput,
};
use semsynth::attention::{attend, attention_map};
use semsynth::diversity::diversity_loss;
use semsynth::mask::SemanticMask;
use semsynth::style_encoder::masked_average_pool;
use semsynth::tensor::{Graph, Tensor};

const TOL: f64 = 1e-6;
const INSTANCES: usize = 100;

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x0c0ffee)
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn assert_close(a: &[f64], b: &[f64], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= TOL * x.abs().max(y.abs()).max(1.0),
            "{what}: element {i} differs, {x} vs {y}"
        );
    }
}

pub fn leaf(g: &Graph<f64>, data: &[f64], shape: &[usize]) -> Tensor<f64> {
    g.constant(data.to_vec(), shape)
}

#[test]
pub fn conv2d_matches_quadruple_loop() {
    let mut r = rng();
    for _ in 0..INSTANCES {
        let groups = *[1usize, 2].iter().filter(|&&g| r.gen::<bool>() || g == 1).last().unwrap();
        let cin = groups * r.gen_range(1..=3);
        let cout = groups * r.gen_range(1..=3);
        let k = r.gen_range(1..=3);
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=1);
        let n = r.gen_range(1..=2);
        let h = r.gen_range(k..=k + 4);
        let w = r.gen_range(k..=k + 4);
        let x = rand_vec(&mut r, n * cin * h * w);
        let wt = rand_vec(&mut r, cout * (cin / groups) * k * k);
        let b = rand_vec(&mut r, cout);

        let g = Graph::<f64>::new();
        let y = leaf(&g, &x, &[n, cin, h, w])
            .conv2d(
                &leaf(&g, &wt, &[cout, cin / groups, k, k]),
                Some(&leaf(&g, &b, &[cout])),
                stride,
                pad,
                groups,
            )
            .unwrap();

        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        assert_eq!(y.shape(), &[n, cout, oh, ow]);

        let cg_in = cin / groups;
        let cg_out = cout / groups;
        let mut oracle = vec![0.0f64; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                let grp = co / cg_out;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cg_in {
                            let ic = grp * cg_in + ci;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((ni * cin + ic) * h + iy as usize) * w + ix as usize;
                                    let wi = ((co * cg_in + ci) * k + ky) * k + kx;
                                    acc += x[xi] * wt[wi];
                                }
                            }
                        }
                        oracle[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        assert_close(&y.value(), &oracle, "conv2d");
    }
}

#[test]
pub fn group_norm_matches_loop() {
    let mut r = rng();
    for _ in 0..INSTANCES {
        let groups = r.gen_range(1..=4);
        let c = groups * r.gen_range(1..=3);
        let n = r.gen_range(1..=2);
        let h = r.gen_range(2..=5);
        let w = r.gen_range(2..=5);
        let eps = 1e-5f64;
        let x = rand_vec(&mut r, n * c * h * w);
        let gamma = rand_vec(&mut r, c);
        let beta = rand_vec(&mut r, c);

        let g = Graph::<f64>::new();
        let y = leaf(&g, &x, &[n, c, h, w])
            .group_norm(groups, &leaf(&g, &gamma, &[c]), &leaf(&g, &beta, &[c]), eps)
            .unwrap();

        let cg = c / groups;
        let gsize = cg * h * w;
        let mut oracle = vec![0.0f64; x.len()];
        for ni in 0..n {
            for gi in 0..groups {
                let mut mean = 0.0;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    for p in 0..h * w {
                        mean += x[(ni * c + ch) * h * w + p];
                    }
                }
                mean /= gsize as f64;
                let mut var = 0.0;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    for p in 0..h * w {
                        let d = x[(ni * c + ch) * h * w + p] - mean;
                        var += d * d;
                    }
                }
                var /= gsize as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    for p in 0..h * w {
                        let i = (ni * c + ch) * h * w + p;
                        oracle[i] = (x[i] - mean) * inv * gamma[ch] + beta[ch];
                    }
                }
            }
        }
        assert_close(&y.value(), &oracle, "group_norm");
    }
}

#[test]
pub fn masked_average_pool_matches_loop() {
    let mut r = rng();
    for _ in 0..INSTANCES {
        let f = r.gen_range(1..=5);
        let h = r.gen_range(2..=6);
        let w = r.gen_range(2..=6);
        let x = rand_vec(&mut r, f * h * w);
        let mask: Vec<f32> = (0..h * w).map(|_| if r.gen::<bool>() { 1.0 } else { 0.0 }).collect();

        let g = Graph::<f64>::new();
        let y = masked_average_pool(&leaf(&g, &x, &[f, h, w]), &mask, h, w).unwrap();

        let count = mask.iter().filter(|&&v| v != 0.0).count();
        let mut oracle = vec![0.0f64; f];
        if count > 0 {
            for fi in 0..f {
                let mut acc = 0.0;
                for p in 0..h * w {
                    if mask[p] != 0.0 {
                        acc += x[fi * h * w + p];
                    }
                }
                oracle[fi] = acc / count as f64;
            }
        }
        assert_close(&y.value(), &oracle, "masked_average_pool");
    }
}

#[test]
pub fn attention_map_and_attend_match_loop() {
    let mut r = rng();
    for _ in 0..INSTANCES {
        let b = r.gen_range(1..=2);
        let m = r.gen_range(1..=5);
        let nk = r.gen_range(1..=5);
        let d = r.gen_range(1..=6);
        let q = rand_vec(&mut r, b * m * d);
        let k = rand_vec(&mut r, b * nk * d);
        let v = rand_vec(&mut r, b * nk * d);

        let g = Graph::<f64>::new();
        let map = attention_map(&leaf(&g, &q, &[b, m, d]), &leaf(&g, &k, &[b, nk, d])).unwrap();
        let out = attend(&map, &leaf(&g, &v, &[b, nk, d])).unwrap();

        let scale = 1.0 / (d as f64).sqrt();
        let mut map_oracle = vec![0.0f64; b * m * nk];
        for bi in 0..b {
            for mi in 0..m {
                let mut scores = vec![0.0f64; nk];
                for ki in 0..nk {
                    let mut acc = 0.0;
                    for di in 0..d {
                        acc += q[(bi * m + mi) * d + di] * k[(bi * nk + ki) * d + di];
                    }
                    scores[ki] = acc * scale;
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for ki in 0..nk {
                    map_oracle[(bi * m + mi) * nk + ki] = exps[ki] / z;
                }
            }
        }
        assert_close(&map.value(), &map_oracle, "attention_map");

        let mut out_oracle = vec![0.0f64; b * m * d];
        for bi in 0..b {
            for mi in 0..m {
                for di in 0..d {
                    let mut acc = 0.0;
                    for ki in 0..nk {
                        acc += map_oracle[(bi * m + mi) * nk + ki] * v[(bi * nk + ki) * d + di];
                    }
                    out_oracle[(bi * m + mi) * d + di] = acc;
                }
            }
        }
        assert_close(&out.value(), &out_oracle, "attend");
    }
}

pub fn bce(x: f64, y: f64) -> f64 {
    let eps = 1e-7;
    let x = x.clamp(eps, 1.0 - eps);
    -(y * x.ln() + (1.0 - y) * (1.0 - x).ln())
}

#[test]
pub fn attention_loss_matches_bce_loop() {
    let mut r = rng();
    for _ in 0..INSTANCES {
        let n = r.gen_range(1..=2);
        let heads = r.gen_range(1..=2);
        let c = r.gen_range(2..=4);
        let side = r.gen_range(2..=4);
        let layers = r.gen_range(1..=3);
        let masks: Vec<SemanticMask> = (0..n)
            .map(|_| {
                let idx: Vec<u8> = (0..side * side).map(|_| r.gen_range(0..c) as u8).collect();
                SemanticMask::from_indices(&idx, c, side, side).unwrap()
            })
            .collect();
        let mask_refs: Vec<&SemanticMask> = masks.iter().collect();

        let g = Graph::<f64>::new();
        let mut stack = Vec::new();
        let mut datas = Vec::new();
        for _ in 0..layers {
            // row-stochastic over the class axis, like real attention maps
            let mut data = vec![0.0f64; n * heads * c * side * side];
            for ni in 0..n {
                for hi in 0..heads {
                    for p in 0..side * side {
                        let raw: Vec<f64> = (0..c).map(|_| r.gen_range(0.01..1.0)).collect();
                        let z: f64 = raw.iter().sum();
                        for (j, &v) in raw.iter().enumerate() {
                            data[(((ni * heads + hi) * c + j) * side * side) + p] = v / z;
                        }
                    }
                }
            }
            stack.push(g.constant(data.clone(), &[n, heads, c, side, side]));
            datas.push(data);
        }
        let loss = attention_loss(&stack, &mask_refs).unwrap().item();

        let mut oracle = 0.0;
        for data in &datas {
            let mut layer = 0.0;
            let mut count = 0usize;
            for ni in 0..n {
                for hi in 0..heads {
                    for j in 0..c {
                        let ch = masks[ni].channel(j);
                        for p in 0..side * side {
                            let x = data[(((ni * heads + hi) * c + j) * side * side) + p];
                            layer += bce(x, ch[p] as f64);
                            count += 1;
                        }
                    }
                }
            }
            oracle += layer / count as f64;
        }
        oracle /= datas.len() as f64;
        assert!(
            (loss - oracle).abs() <= TOL * oracle.abs().max(1.0),
            "attention_loss {loss} vs oracle {oracle}"
        );
    }
}

pub fn random_outputs(
    g: &Graph<f64>,
    r: &mut ChaCha8Rng,
    scales: usize,
    feats: usize,
    side: usize,
) -> (DiscriminatorOutputs<f64>, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let mut out = DiscriminatorOutputs { scales: Vec::new() };
    let mut scores = Vec::new();
    let mut features = Vec::new();
    for _ in 0..scales {
        let s = rand_vec(r, side * side);
        let fs: Vec<Vec<f64>> = (0..feats).map(|_| rand_vec(r, 2 * side * side)).collect();
        out.scales.push(ScaleOutput {
            score: g.constant(s.clone(), &[1, 1, side, side]),
            features: fs
                .iter()
                .map(|f| g.constant(f.clone(), &[1, 2, side, side]))
                .collect(),
        });
        scores.push(s);
        features.push(fs);
    }
    (out, scores, features)
}

#[test]
pub fn hinge_losses_match_loop() {
    let mut r = rng();
    for _ in 0..INSTANCES {
        let scales = r.gen_range(1..=3);
        let side = r.gen_range(2..=4);
        let g = Graph::<f64>::new();
        let (real, rs, _) = random_outputs(&g, &mut r, scales, 1, side);
        let (fake, fs, _) = random_outputs(&g, &mut r, scales, 1, side);
        let (adv_d, adv_g) = hinge_losses(&real, &fake).unwrap();

        let mut od = 0.0;
        let mut og = 0.0;
        for si in 0..scales {
            let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| {
                v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64
            };
            od += mean(&rs[si], &|x| (1.0 - x).max(0.0)) + mean(&fs[si], &|x| (1.0 + x).max(0.0));
            og += -mean(&fs[si], &|x| x);
        }
        od /= scales as f64;
        og /= scales as f64;
        assert!((adv_d.item() - od).abs() <= TOL, "adv_d {} vs {od}", adv_d.item());
        assert!((adv_g.item() - og).abs() <= TOL, "adv_g {} vs {og}", adv_g.item());
    }
}

#[test]
pub fn feature_matching_matches_loop() {
    let mut r = rng();
    for _ in 0..INSTANCES {
        let scales = r.gen_range(1..=3);
        let feats = r.gen_range(1..=3);
        let side = r.gen_range(2..=4);
        let g = Graph::<f64>::new();
        let (real, _, rf) = random_outputs(&g, &mut r, scales, feats, side);
        let (fake, _, ff) = random_outputs(&g, &mut r, scales, feats, side);
        let fm = feature_matching_loss(&real, &fake).unwrap().item();

        let mut acc = 0.0;
        let mut count = 0usize;
        for si in 0..scales {
            for fi in 0..feats {
                let a = &rf[si][fi];
                let b = &ff[si][fi];
                acc += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
                count += 1;
            }
        }
        let oracle = acc / count as f64;
        assert!((fm - oracle).abs() <= TOL, "feature_matching {fm} vs {oracle}");
    }
}

#[test]
pub fn diversity_loss_matches_loop() {
    let mut r = rng();
    for _ in 0..INSTANCES {
        let n = r.gen_range(1..=2);
        let side = r.gen_range(2..=6);
        let a = rand_vec(&mut r, n * 3 * side * side);
        let b = rand_vec(&mut r, n * 3 * side * side);
        let g = Graph::<f64>::new();
        let loss = diversity_loss(
            &leaf(&g, &a, &[n, 3, side, side]),
            &leaf(&g, &b, &[n, 3, side, side]),
        )
        .unwrap()
        .item();
        let oracle =
            -a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!((loss - oracle).abs() <= TOL, "diversity {loss} vs {oracle}");
    }
}
