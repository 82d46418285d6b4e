//! Dense compute kernels for the tape ops. All loops are written in
//! gather/axpy form so results are deterministic regardless of call order.

use super::scalar::Scalar;

/// Shape of a conv2d output plane.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

pub struct ConvArgs {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvArgs {
    pub fn out_h(&self) -> usize {
        conv_out_dim(self.h, self.kh, self.stride, self.padding)
    }
    pub fn out_w(&self) -> usize {
        conv_out_dim(self.w, self.kw, self.stride, self.padding)
    }
}

/// Grouped cross-correlation, NCHW layout.
pub fn conv2d_fwd<E: Scalar>(x: &[E], wgt: &[E], bias: Option<&[E]>, a: &ConvArgs) -> Vec<E> {
    let (oh, ow) = (a.out_h(), a.out_w());
    let cg_in = a.cin / a.groups;
    let cg_out = a.cout / a.groups;
    let mut y = vec![E::zero(); a.n * a.cout * oh * ow];
    for n in 0..a.n {
        for co in 0..a.cout {
            let g = co / cg_out;
            let y_base = (n * a.cout + co) * oh * ow;
            if let Some(b) = bias {
                let bv = b[co];
                for v in &mut y[y_base..y_base + oh * ow] {
                    *v = bv;
                }
            }
            for cg in 0..cg_in {
                let ci = g * cg_in + cg;
                let x_base = (n * a.cin + ci) * a.h * a.w;
                for kh in 0..a.kh {
                    for kw in 0..a.kw {
                        let wv = wgt[((co * cg_in + cg) * a.kh + kh) * a.kw + kw];
                        if wv == E::zero() {
                            continue;
                        }
                        for ho in 0..oh {
                            let hi = (ho * a.stride + kh) as isize - a.padding as isize;
                            if hi < 0 || hi >= a.h as isize {
                                continue;
                            }
                            let xrow = x_base + hi as usize * a.w;
                            let yrow = y_base + ho * ow;
                            for wo in 0..ow {
                                let wi = (wo * a.stride + kw) as isize - a.padding as isize;
                                if wi < 0 || wi >= a.w as isize {
                                    continue;
                                }
                                y[yrow + wo] = y[yrow + wo] + wv * x[xrow + wi as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient w.r.t. the conv input (gather over output positions).
pub fn conv2d_bwd_input<E: Scalar>(dy: &[E], wgt: &[E], a: &ConvArgs) -> Vec<E> {
    let (oh, ow) = (a.out_h(), a.out_w());
    let cg_in = a.cin / a.groups;
    let cg_out = a.cout / a.groups;
    let mut dx = vec![E::zero(); a.n * a.cin * a.h * a.w];
    for n in 0..a.n {
        for co in 0..a.cout {
            let g = co / cg_out;
            let dy_base = (n * a.cout + co) * oh * ow;
            for cg in 0..cg_in {
                let ci = g * cg_in + cg;
                let dx_base = (n * a.cin + ci) * a.h * a.w;
                for kh in 0..a.kh {
                    for kw in 0..a.kw {
                        let wv = wgt[((co * cg_in + cg) * a.kh + kh) * a.kw + kw];
                        if wv == E::zero() {
                            continue;
                        }
                        for ho in 0..oh {
                            let hi = (ho * a.stride + kh) as isize - a.padding as isize;
                            if hi < 0 || hi >= a.h as isize {
                                continue;
                            }
                            let dxrow = dx_base + hi as usize * a.w;
                            let dyrow = dy_base + ho * ow;
                            for wo in 0..ow {
                                let wi = (wo * a.stride + kw) as isize - a.padding as isize;
                                if wi < 0 || wi >= a.w as isize {
                                    continue;
                                }
                                let i = dxrow + wi as usize;
                                dx[i] = dx[i] + wv * dy[dyrow + wo];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient w.r.t. the conv weight.
pub fn conv2d_bwd_weight<E: Scalar>(x: &[E], dy: &[E], a: &ConvArgs) -> Vec<E> {
    let (oh, ow) = (a.out_h(), a.out_w());
    let cg_in = a.cin / a.groups;
    let cg_out = a.cout / a.groups;
    let mut dw = vec![E::zero(); a.cout * cg_in * a.kh * a.kw];
    for co in 0..a.cout {
        let g = co / cg_out;
        for cg in 0..cg_in {
            let ci = g * cg_in + cg;
            for kh in 0..a.kh {
                for kw in 0..a.kw {
                    let mut acc = E::zero();
                    for n in 0..a.n {
                        let dy_base = (n * a.cout + co) * oh * ow;
                        let x_base = (n * a.cin + ci) * a.h * a.w;
                        for ho in 0..oh {
                            let hi = (ho * a.stride + kh) as isize - a.padding as isize;
                            if hi < 0 || hi >= a.h as isize {
                                continue;
                            }
                            let xrow = x_base + hi as usize * a.w;
                            let dyrow = dy_base + ho * ow;
                            for wo in 0..ow {
                                let wi = (wo * a.stride + kw) as isize - a.padding as isize;
                                if wi < 0 || wi >= a.w as isize {
                                    continue;
                                }
                                acc = acc + dy[dyrow + wo] * x[xrow + wi as usize];
                            }
                        }
                    }
                    dw[((co * cg_in + cg) * a.kh + kh) * a.kw + kw] = acc;
                }
            }
        }
    }
    dw
}

/// Gradient w.r.t. the conv bias.
pub fn conv2d_bwd_bias<E: Scalar>(dy: &[E], a: &ConvArgs) -> Vec<E> {
    let plane = a.out_h() * a.out_w();
    let mut db = vec![E::zero(); a.cout];
    for n in 0..a.n {
        for co in 0..a.cout {
            let base = (n * a.cout + co) * plane;
            let mut acc = E::zero();
            for v in &dy[base..base + plane] {
                acc = acc + *v;
            }
            db[co] = db[co] + acc;
        }
    }
    db
}

/// y[m, o] = sum_i x[m, i] * w[o, i] + b[o]
pub fn linear_fwd<E: Scalar>(
    x: &[E],
    w: &[E],
    b: Option<&[E]>,
    m: usize,
    din: usize,
    dout: usize,
) -> Vec<E> {
    let mut y = vec![E::zero(); m * dout];
    for r in 0..m {
        let xrow = &x[r * din..(r + 1) * din];
        let yrow = &mut y[r * dout..(r + 1) * dout];
        for o in 0..dout {
            let wrow = &w[o * din..(o + 1) * din];
            let mut acc = E::zero();
            for i in 0..din {
                acc = acc + xrow[i] * wrow[i];
            }
            yrow[o] = match b {
                Some(b) => acc + b[o],
                None => acc,
            };
        }
    }
    y
}

pub fn linear_bwd_input<E: Scalar>(dy: &[E], w: &[E], m: usize, din: usize, dout: usize) -> Vec<E> {
    let mut dx = vec![E::zero(); m * din];
    for r in 0..m {
        let dyrow = &dy[r * dout..(r + 1) * dout];
        let dxrow = &mut dx[r * din..(r + 1) * din];
        for o in 0..dout {
            let g = dyrow[o];
            if g == E::zero() {
                continue;
            }
            let wrow = &w[o * din..(o + 1) * din];
            for i in 0..din {
                dxrow[i] = dxrow[i] + g * wrow[i];
            }
        }
    }
    dx
}

pub fn linear_bwd_weight<E: Scalar>(x: &[E], dy: &[E], m: usize, din: usize, dout: usize) -> Vec<E> {
    let mut dw = vec![E::zero(); dout * din];
    for r in 0..m {
        let xrow = &x[r * din..(r + 1) * din];
        let dyrow = &dy[r * dout..(r + 1) * dout];
        for o in 0..dout {
            let g = dyrow[o];
            if g == E::zero() {
                continue;
            }
            let dwrow = &mut dw[o * din..(o + 1) * din];
            for i in 0..din {
                dwrow[i] = dwrow[i] + g * xrow[i];
            }
        }
    }
    dw
}

pub fn linear_bwd_bias<E: Scalar>(dy: &[E], m: usize, dout: usize) -> Vec<E> {
    let mut db = vec![E::zero(); dout];
    for r in 0..m {
        for o in 0..dout {
            db[o] = db[o] + dy[r * dout + o];
        }
    }
    db
}

/// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N]; `nt` treats b as [B,N,K].
pub fn bmm_fwd<E: Scalar>(
    a: &[E],
    b: &[E],
    bs: usize,
    m: usize,
    k: usize,
    n: usize,
    nt: bool,
) -> Vec<E> {
    let mut y = vec![E::zero(); bs * m * n];
    for bi in 0..bs {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        let yb = &mut y[bi * m * n..(bi + 1) * m * n];
        if nt {
            // b laid out [N, K]: rows of both operands are contiguous
            for r in 0..m {
                let arow = &ab[r * k..(r + 1) * k];
                for c in 0..n {
                    let brow = &bb[c * k..(c + 1) * k];
                    let mut acc = E::zero();
                    for i in 0..k {
                        acc = acc + arow[i] * brow[i];
                    }
                    yb[r * n + c] = acc;
                }
            }
        } else {
            for r in 0..m {
                let arow = &ab[r * k..(r + 1) * k];
                let yrow = &mut yb[r * n..(r + 1) * n];
                for i in 0..k {
                    let av = arow[i];
                    if av == E::zero() {
                        continue;
                    }
                    let brow = &bb[i * n..(i + 1) * n];
                    for c in 0..n {
                        yrow[c] = yrow[c] + av * brow[c];
                    }
                }
            }
        }
    }
    y
}

pub fn softmax_fwd<E: Scalar>(x: &[E], shape: &[usize], axis: usize) -> Vec<E> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut y = vec![E::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut mx = x[base];
            for j in 1..axis_len {
                let v = x[base + j * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = E::zero();
            for j in 0..axis_len {
                let e = (x[base + j * inner] - mx).exp();
                y[base + j * inner] = e;
                sum = sum + e;
            }
            let inv = E::one() / sum;
            for j in 0..axis_len {
                y[base + j * inner] = y[base + j * inner] * inv;
            }
        }
    }
    y
}

/// dx = y * (dy - sum_axis(dy * y))
pub fn softmax_bwd<E: Scalar>(y: &[E], dy: &[E], shape: &[usize], axis: usize) -> Vec<E> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut dx = vec![E::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut dot = E::zero();
            for j in 0..axis_len {
                let idx = base + j * inner;
                dot = dot + dy[idx] * y[idx];
            }
            for j in 0..axis_len {
                let idx = base + j * inner;
                dx[idx] = y[idx] * (dy[idx] - dot);
            }
        }
    }
    dx
}

/// Per-(sample, group) standardization stats. Returns (mean, invstd), one per n*g.
pub fn group_norm_stats<E: Scalar>(
    x: &[E],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: E,
) -> (Vec<E>, Vec<E>) {
    let cg = c / groups;
    let gsize = cg * hw;
    let mut mean = vec![E::zero(); n * groups];
    let mut invstd = vec![E::zero(); n * groups];
    for ni in 0..n {
        for g in 0..groups {
            let base = (ni * c + g * cg) * hw;
            let slice = &x[base..base + gsize];
            let mut s = E::zero();
            for v in slice {
                s = s + *v;
            }
            let m = s / E::from_f64((gsize) as f64);
            let mut v2 = E::zero();
            for v in slice {
                let d = *v - m;
                v2 = v2 + d * d;
            }
            let var = v2 / E::from_f64((gsize) as f64);
            mean[ni * groups + g] = m;
            invstd[ni * groups + g] = E::one() / (var + eps).sqrt();
        }
    }
    (mean, invstd)
}

pub fn group_norm_fwd<E: Scalar>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    mean: &[E],
    invstd: &[E],
) -> Vec<E> {
    let cg = c / groups;
    let mut y = vec![E::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let g = ci / cg;
            let m = mean[ni * groups + g];
            let is = invstd[ni * groups + g];
            let (ga, be) = (gamma[ci], beta[ci]);
            let base = (ni * c + ci) * hw;
            for i in 0..hw {
                y[base + i] = (x[base + i] - m) * is * ga + be;
            }
        }
    }
    y
}

/// Standard group-norm backward. Returns (dx, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
pub fn group_norm_bwd<E: Scalar>(
    x: &[E],
    gamma: &[E],
    dy: &[E],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    mean: &[E],
    invstd: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let cg = c / groups;
    let gsize = E::from_f64((cg * hw) as f64);
    let mut dx = vec![E::zero(); x.len()];
    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let g = ci / cg;
            let m = mean[ni * groups + g];
            let is = invstd[ni * groups + g];
            let base = (ni * c + ci) * hw;
            let mut dg = E::zero();
            let mut db = E::zero();
            for i in 0..hw {
                let xhat = (x[base + i] - m) * is;
                dg = dg + dy[base + i] * xhat;
                db = db + dy[base + i];
            }
            dgamma[ci] = dgamma[ci] + dg;
            dbeta[ci] = dbeta[ci] + db;
        }
        for g in 0..groups {
            let m = mean[ni * groups + g];
            let is = invstd[ni * groups + g];
            // sums of dxhat and dxhat*xhat over the group
            let mut s1 = E::zero();
            let mut s2 = E::zero();
            for ci in g * cg..(g + 1) * cg {
                let base = (ni * c + ci) * hw;
                let ga = gamma[ci];
                for i in 0..hw {
                    let dxhat = dy[base + i] * ga;
                    let xhat = (x[base + i] - m) * is;
                    s1 = s1 + dxhat;
                    s2 = s2 + dxhat * xhat;
                }
            }
            for ci in g * cg..(g + 1) * cg {
                let base = (ni * c + ci) * hw;
                let ga = gamma[ci];
                for i in 0..hw {
                    let dxhat = dy[base + i] * ga;
                    let xhat = (x[base + i] - m) * is;
                    dx[base + i] = is * (dxhat - (s1 + xhat * s2) / gsize);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-major permutation of axes, materialized.
pub fn permute<E: Scalar>(x: &[E], shape: &[usize], axes: &[usize]) -> Vec<E> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    let total = x.len();
    let mut y = vec![E::zero(); total];
    let mut idx = vec![0usize; rank];
    for (out_pos, slot) in y.iter_mut().enumerate() {
        // decompose out_pos into out-index, map back through axes
        let mut rem = out_pos;
        for i in 0..rank {
            idx[i] = rem / out_strides[i];
            rem %= out_strides[i];
        }
        let mut in_pos = 0;
        for i in 0..rank {
            in_pos += idx[i] * in_strides[axes[i]];
        }
        *slot = x[in_pos];
    }
    y
}

pub fn upsample2x_fwd<E: Scalar>(x: &[E], n: usize, c: usize, h: usize, w: usize) -> Vec<E> {
    let mut y = vec![E::zero(); n * c * 4 * h * w];
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..n * c {
        let xb = p * h * w;
        let yb = p * oh * ow;
        for ho in 0..oh {
            let xrow = xb + (ho / 2) * w;
            let yrow = yb + ho * ow;
            for wo in 0..ow {
                y[yrow + wo] = x[xrow + wo / 2];
            }
        }
    }
    y
}

pub fn upsample2x_bwd<E: Scalar>(dy: &[E], n: usize, c: usize, h: usize, w: usize) -> Vec<E> {
    let mut dx = vec![E::zero(); n * c * h * w];
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..n * c {
        let xb = p * h * w;
        let yb = p * oh * ow;
        for ho in 0..oh {
            let xrow = xb + (ho / 2) * w;
            let yrow = yb + ho * ow;
            for wo in 0..ow {
                dx[xrow + wo / 2] = dx[xrow + wo / 2] + dy[yrow + wo];
            }
        }
    }
    dx
}

pub fn avgpool2x_fwd<E: Scalar>(x: &[E], n: usize, c: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = E::from_f64(0.25);
    let mut y = vec![E::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let xb = p * h * w;
        let yb = p * oh * ow;
        for ho in 0..oh {
            let r0 = xb + 2 * ho * w;
            let r1 = r0 + w;
            let yrow = yb + ho * ow;
            for wo in 0..ow {
                let s = x[r0 + 2 * wo] + x[r0 + 2 * wo + 1] + x[r1 + 2 * wo] + x[r1 + 2 * wo + 1];
                y[yrow + wo] = s * quarter;
            }
        }
    }
    y
}

pub fn avgpool2x_bwd<E: Scalar>(dy: &[E], n: usize, c: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = E::from_f64(0.25);
    let mut dx = vec![E::zero(); n * c * h * w];
    for p in 0..n * c {
        let xb = p * h * w;
        let yb = p * oh * ow;
        for ho in 0..oh {
            let r0 = xb + 2 * ho * w;
            let r1 = r0 + w;
            let yrow = yb + ho * ow;
            for wo in 0..ow {
                let g = dy[yrow + wo] * quarter;
                dx[r0 + 2 * wo] = dx[r0 + 2 * wo] + g;
                dx[r0 + 2 * wo + 1] = dx[r0 + 2 * wo + 1] + g;
                dx[r1 + 2 * wo] = dx[r1 + 2 * wo] + g;
                dx[r1 + 2 * wo + 1] = dx[r1 + 2 * wo + 1] + g;
            }
        }
    }
    dx
}

/// [B,M,P1] x [B,M,P2] -> [B,P1,P2], contracting over M (first operand transposed).
pub fn bmm_tn<E: Scalar>(p: &[E], q: &[E], bs: usize, m: usize, p1: usize, p2: usize) -> Vec<E> {
    let mut y = vec![E::zero(); bs * p1 * p2];
    for bi in 0..bs {
        let pb = &p[bi * m * p1..(bi + 1) * m * p1];
        let qb = &q[bi * m * p2..(bi + 1) * m * p2];
        let yb = &mut y[bi * p1 * p2..(bi + 1) * p1 * p2];
        for r in 0..m {
            let prow = &pb[r * p1..(r + 1) * p1];
            let qrow = &qb[r * p2..(r + 1) * p2];
            for i in 0..p1 {
                let pv = prow[i];
                if pv == E::zero() {
                    continue;
                }
                let yrow = &mut yb[i * p2..(i + 1) * p2];
                for j in 0..p2 {
                    yrow[j] = yrow[j] + pv * qrow[j];
                }
            }
        }
    }
    y
}
