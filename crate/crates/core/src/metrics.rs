//! Evaluation metrics: pixel distances, attention-map IoU against the mask,
//! and a Frechet distance over frozen random features (an FID stand-in that
//! is deliberately not FID: no pretrained network is involved).

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mask::SemanticMask;

pub fn mean_l1(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// Peak signal-to-noise ratio for images in [-1, 1] (peak 2.0).
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (4.0 / mse).log10()
    }
}

/// Per-class IoU between thresholded head-averaged attention and the mask.
/// `maps` is one sample's cross-attention map, [heads, C, H, W] row-major.
pub fn attention_iou(
    maps: &[f64],
    heads: usize,
    mask: &SemanticMask,
    threshold: f64,
) -> Result<Vec<f64>> {
    let c = mask.num_classes();
    if maps.len() % (heads * c) != 0 {
        return Err(Error::Dim(format!(
            "attention_iou: {} values do not factor into {heads} heads x {c} classes",
            maps.len()
        )));
    }
    let hw = maps.len() / (heads * c);
    let side_ok = mask.height() * mask.width() == hw;
    let resized;
    let m = if side_ok {
        mask
    } else {
        let side = (hw as f64).sqrt().round() as usize;
        if side * side != hw {
            return Err(Error::Dim(format!(
                "attention_iou: map area {hw} is not square"
            )));
        }
        resized = mask.resize(side, side);
        &resized
    };
    let mut out = Vec::with_capacity(c);
    for j in 0..c {
        let channel = m.channel(j);
        let mut inter = 0usize;
        let mut union = 0usize;
        for p in 0..hw {
            let mut mean = 0.0;
            for h in 0..heads {
                mean += maps[(h * c + j) * hw + p];
            }
            mean /= heads as f64;
            let pred = mean > threshold;
            let truth = channel[p] == 1.0;
            if pred && truth {
                inter += 1;
            }
            if pred || truth {
                union += 1;
            }
        }
        out.push(if union == 0 { 1.0 } else { inter as f64 / union as f64 });
    }
    Ok(out)
}

/// Default IoU threshold: twice the uniform attention level.
pub fn iou_threshold(num_classes: usize) -> f64 {
    2.0 / num_classes as f64
}

/// Frechet distance between two Gaussians fit to descriptor sets.
/// Rows of `a` and `b` are per-sample feature vectors of equal width.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Arg("frechet_distance: empty descriptor set".into()));
    }
    let d = a[0].len();
    if b[0].len() != d {
        return Err(Error::Dim(format!(
            "frechet_distance: widths {d} vs {}",
            b[0].len()
        )));
    }
    let (mu_a, cov_a) = gaussian_fit(a, d);
    let (mu_b, cov_b) = gaussian_fit(b, d);
    let diff = &mu_a - &mu_b;
    let mean_term = diff.dot(&diff);
    let sqrt_a = sym_sqrt(&cov_a);
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    // tr((Ca Cb)^{1/2}) = sum of sqrt eigenvalues of Ca^{1/2} Cb Ca^{1/2}
    let tr_cross: f64 = nalgebra::SymmetricEigen::new(symmetrize(&inner))
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    Ok(mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross)
}

fn gaussian_fit(rows: &[Vec<f64>], d: usize) -> (nalgebra::DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let mut mu = nalgebra::DVector::zeros(d);
    for r in rows {
        for i in 0..d {
            mu[i] += r[i];
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            let di = r[i] - mu[i];
            for j in 0..d {
                cov[(i, j)] += di * (r[j] - mu[j]);
            }
        }
    }
    cov /= (n.max(2) - 1) as f64;
    (mu, cov)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(m));
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}
