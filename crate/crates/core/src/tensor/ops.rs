//! Forward kernels and their vector-Jacobian products.
//!
//! Every public function here is pure: it reads its inputs and returns a new
//! [`Tensor`]. The `*_backward` helpers are used by the tape.

use super::Tensor;
use crate::error::{Error, Result};

// ── broadcasting ─────────────────────────────────────────────────────

/// Numpy-style broadcast of two shapes, aligned on the right.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let db = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `input` laid over `out`, with 0 on broadcast axes.
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - input.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for d in (0..input.len()).rev() {
        if input[d] != 1 {
            strides[d + offset] = s;
        }
        s *= input[d];
    }
    strides
}

/// Visits every multi-index of `shape` in row-major order, passing the flat
/// output index and one strided offset per entry of `strides`.
fn for_each_strided<const N: usize>(shape: &[usize], strides: [&[usize]; N], mut f: impl FnMut(usize, [usize; N])) {
    let total: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offs = [0usize; N];
    for flat in 0..total {
        f(flat, offs);
        for d in (0..rank).rev() {
            idx[d] += 1;
            for (o, s) in offs.iter_mut().zip(strides.iter()) {
                *o += s[d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(strides.iter()) {
                *o -= s[d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape("add", a.shape(), b.shape()))?;
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == out_shape.as_slice() {
        if b.shape() == out_shape.as_slice() {
            let data = ad.iter().zip(bd).map(|(x, y)| x + y).collect();
            return Ok(Tensor::from_parts(out_shape, data));
        }
        if out_shape.ends_with(b.shape()) {
            let n = bd.len();
            let data = ad.iter().enumerate().map(|(i, x)| x + bd[i % n]).collect();
            return Ok(Tensor::from_parts(out_shape, data));
        }
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![0.0; out_shape.iter().product()];
    for_each_strided(&out_shape, [&sa, &sb], |i, [oa, ob]| data[i] = ad[oa] + bd[ob]);
    Ok(Tensor::from_parts(out_shape, data))
}

/// Sums `grad` down to `shape`, undoing a broadcast.
pub(crate) fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut data = vec![0.0; shape.iter().product::<usize>().max(1)];
    let g = grad.data();
    if grad.shape().ends_with(shape) {
        let n = data.len();
        for (i, v) in g.iter().enumerate() {
            data[i % n] += v;
        }
    } else {
        let s = broadcast_strides(shape, grad.shape());
        for_each_strided(grad.shape(), [&s], |i, [o]| data[o] += g[i]);
    }
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    a.map(|v| v * factor)
}

// ── matmul ───────────────────────────────────────────────────────────

/// c[m,n] += a[m,k] · b[k,n]
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            let bp = &b[p * n..(p + 1) * n];
            for (cj, &bj) in ci.iter_mut().zip(bp) {
                *cj += aip * bj;
            }
        }
    }
}

/// c[m,k] += g[m,n] · b[k,n]ᵀ
fn gemm_nt(m: usize, k: usize, n: usize, g: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            c[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · g[m,n]
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], g: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let cp = &mut c[p * n..(p + 1) * n];
            for (cj, &gj) in cp.iter_mut().zip(gi) {
                *cj += aip * gj;
            }
        }
    }
}

struct MatmulGeometry {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

fn matmul_geometry(a: &[usize], b: &[usize]) -> Result<MatmulGeometry> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ab, bb).ok_or_else(|| Error::shape("matmul", a, b))?;
    Ok(MatmulGeometry {
        m,
        k,
        n,
        a_strides: broadcast_strides(ab, &batch),
        b_strides: broadcast_strides(bb, &batch),
        batch,
    })
}

/// Batched matrix product `[..., m, k] × [..., k, n]` with broadcast batch axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let g = matmul_geometry(a.shape(), b.shape())?;
    let (m, k, n) = (g.m, g.k, g.n);
    let nb: usize = g.batch.iter().product();
    let mut out = vec![0.0; nb * m * n];
    let (ad, bd) = (a.data(), b.data());
    for_each_strided(&g.batch, [&g.a_strides, &g.b_strides], |bi, [oa, ob]| {
        gemm_nn(
            m,
            k,
            n,
            &ad[oa * m * k..(oa + 1) * m * k],
            &bd[ob * k * n..(ob + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    });
    let mut shape = g.batch;
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let g = matmul_geometry(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, n) = (g.m, g.k, g.n);
    let mut da = vec![0.0; a.numel()];
    let mut db = vec![0.0; b.numel()];
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    for_each_strided(&g.batch, [&g.a_strides, &g.b_strides], |bi, [oa, ob]| {
        let gs = &gd[bi * m * n..(bi + 1) * m * n];
        gemm_nt(
            m,
            k,
            n,
            gs,
            &bd[ob * k * n..(ob + 1) * k * n],
            &mut da[oa * m * k..(oa + 1) * m * k],
        );
        gemm_tn(
            m,
            k,
            n,
            &ad[oa * m * k..(oa + 1) * m * k],
            gs,
            &mut db[ob * k * n..(ob + 1) * k * n],
        );
    });
    (
        Tensor::from_parts(a.shape().to_vec(), da),
        Tensor::from_parts(b.shape().to_vec(), db),
    )
}

// ── permutation ──────────────────────────────────────────────────────

pub fn permute(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = a.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
        return Err(Error::invalid(
            "permute",
            format!("axes {axes:?} are not a permutation for shape {:?}", a.shape()),
        ));
    }
    let in_shape = a.shape();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&x| in_shape[x]).collect();
    // Trailing axes left in place are copied as contiguous runs.
    let mut keep = rank;
    while keep > 0 && axes[keep - 1] == keep - 1 {
        keep -= 1;
    }
    let run: usize = in_shape[keep..].iter().product();
    let outer_shape = &out_shape[..keep];
    let outer_strides: Vec<usize> = axes[..keep].iter().map(|&x| in_strides[x]).collect();
    let src = a.data();
    let mut data = vec![0.0; a.numel()];
    for_each_strided(outer_shape, [&outer_strides], |i, [o]| {
        data[i * run..(i + 1) * run].copy_from_slice(&src[o..o + run]);
    });
    Ok(Tensor::from_parts(out_shape, data))
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (d, &x) in axes.iter().enumerate() {
        inv[x] = d;
    }
    inv
}

// ── softmax ──────────────────────────────────────────────────────────

fn check_finite(op: &'static str, x: &Tensor) -> Result<()> {
    if let Some(pos) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op,
            detail: format!("non-finite input {} at flat index {pos}", x.data()[pos]),
        });
    }
    Ok(())
}

fn last_extent(op: &'static str, x: &Tensor) -> Result<usize> {
    x.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::invalid(op, "scalar input has no last axis"))
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    check_finite("softmax", x)?;
    let n = last_extent("softmax", x)?;
    let mut out = x.to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Softmax over the last axis where only `allowed` entries take part.
///
/// `allowed` covers the trailing `rows × n` block and repeats over the
/// leading axes. Excluded entries get probability exactly zero.
pub fn masked_softmax_lastdim(x: &Tensor, allowed: &[bool]) -> Result<Tensor> {
    check_finite("masked_softmax", x)?;
    let n = last_extent("masked_softmax", x)?;
    if allowed.is_empty() || !allowed.len().is_multiple_of(n) || !x.numel().is_multiple_of(allowed.len()) {
        return Err(Error::invalid(
            "masked_softmax",
            format!("mask of length {} does not tile shape {:?}", allowed.len(), x.shape()),
        ));
    }
    if allowed.chunks(n).any(|r| !r.contains(&true)) {
        return Err(Error::invalid("masked_softmax", "a mask row excludes every entry"));
    }
    let pattern_rows = allowed.len() / n;
    let mut out = x.to_vec();
    for (r, row) in out.chunks_mut(n).enumerate() {
        let mask = &allowed[(r % pattern_rows) * n..][..n];
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (v, &m) in row.iter_mut().zip(mask) {
            *v = if m { (*v - max).exp() } else { 0.0 };
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Shared by plain and masked softmax: masked entries have y = 0 and so
/// receive zero gradient.
pub(crate) fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let n = *y.shape().last().expect("rank >= 1");
    let mut dx = vec![0.0; y.numel()];
    for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.data().chunks(n)).zip(dy.data().chunks(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

// ── layernorm ────────────────────────────────────────────────────────

fn layernorm_check(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<usize> {
    let c = last_extent("layernorm", x)?;
    if gamma.shape() != [c] {
        return Err(Error::shape("layernorm", x.shape(), gamma.shape()));
    }
    if beta.shape() != [c] {
        return Err(Error::shape("layernorm", x.shape(), beta.shape()));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Numeric {
            op: "layernorm",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    Ok(c)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Normalizes each position over the channel axis, then applies `gamma·x̂ + beta`.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = layernorm_check(x, gamma, beta, eps)?;
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![0.0; x.numel()];
    for (orow, row) in out.chunks_mut(c).zip(x.data().chunks(c)) {
        let (mean, rstd) = row_stats(row, eps);
        for k in 0..c {
            orow[k] = g[k] * (row[k] - mean) * rstd + b[k];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn layernorm_backward(x: &Tensor, gamma: &Tensor, eps: f64, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = gamma.numel();
    let g = gamma.data();
    let mut dx = vec![0.0; x.numel()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for ((dxr, row), gr) in dx.chunks_mut(c).zip(x.data().chunks(c)).zip(dy.data().chunks(c)) {
        let (mean, rstd) = row_stats(row, eps);
        for k in 0..c {
            xhat[k] = (row[k] - mean) * rstd;
            dxhat[k] = gr[k] * g[k];
            dgamma[k] += gr[k] * xhat[k];
            dbeta[k] += gr[k];
        }
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
        let cf = c as f64;
        for k in 0..c {
            dxr[k] = rstd / cf * (cf * dxhat[k] - sum_d - xhat[k] * sum_dx);
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

// ── gelu ─────────────────────────────────────────────────────────────

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| v * std_normal_cdf(v))
}

pub(crate) fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * (std_normal_cdf(v) + v * inv_sqrt_2pi * (-0.5 * v * v).exp()))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

// ── convolution ──────────────────────────────────────────────────────

/// Geometry of a channels-last 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

struct ConvDims {
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    k: usize,
    co: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(x: &Tensor, w: &Tensor, bias: &Tensor, spec: Conv2dSpec) -> Result<ConvDims> {
    let (b, h, wd, ci) = super::feature_dims(x.shape())?;
    let [k, k2, wci, co] = *w.shape() else {
        return Err(Error::invalid(
            "conv2d",
            format!("weight must be (K, K, Cin, Cout), got {:?}", w.shape()),
        ));
    };
    if k != k2 || wci != ci {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    if bias.shape() != [co] {
        return Err(Error::shape("conv2d", w.shape(), bias.shape()));
    }
    if spec.stride == 0 || h + 2 * spec.padding < k || wd + 2 * spec.padding < k {
        return Err(Error::invalid(
            "conv2d",
            "kernel larger than padded input or zero stride",
        ));
    }
    Ok(ConvDims {
        b,
        h,
        w: wd,
        ci,
        k,
        co,
        ho: (h + 2 * spec.padding - k) / spec.stride + 1,
        wo: (wd + 2 * spec.padding - k) / spec.stride + 1,
    })
}

/// Input coordinate for output index `o` and tap `t`, if inside the image.
#[inline]
fn tap(o: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    (o * stride + t).checked_sub(pad).filter(|&v| v < extent)
}

fn im2col(x: &[f64], d: &ConvDims, spec: Conv2dSpec) -> Vec<f64> {
    let row = d.k * d.k * d.ci;
    let mut cols = vec![0.0; d.b * d.ho * d.wo * row];
    for bi in 0..d.b {
        for oi in 0..d.ho {
            for oj in 0..d.wo {
                let r = &mut cols[((bi * d.ho + oi) * d.wo + oj) * row..][..row];
                for ki in 0..d.k {
                    let Some(ii) = tap(oi, ki, spec.stride, spec.padding, d.h) else {
                        continue;
                    };
                    for kj in 0..d.k {
                        let Some(jj) = tap(oj, kj, spec.stride, spec.padding, d.w) else {
                            continue;
                        };
                        let src = &x[((bi * d.h + ii) * d.w + jj) * d.ci..][..d.ci];
                        r[(ki * d.k + kj) * d.ci..][..d.ci].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

/// Dense 2D convolution. `x` is `(B, H, W, Cin)`, `w` is `(K, K, Cin, Cout)`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let d = conv_dims(x, w, bias, spec)?;
    let rows = d.b * d.ho * d.wo;
    let cols = im2col(x.data(), &d, spec);
    let mut out: Vec<f64> = bias.data().iter().copied().cycle().take(rows * d.co).collect();
    gemm_nn(rows, d.k * d.k * d.ci, d.co, &cols, w.data(), &mut out);
    Ok(Tensor::from_parts(vec![d.b, d.ho, d.wo, d.co], out))
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    spec: Conv2dSpec,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = conv_dims(x, w, bias, spec).expect("validated in forward");
    let rows = d.b * d.ho * d.wo;
    let row = d.k * d.k * d.ci;
    let cols = im2col(x.data(), &d, spec);
    let mut dw = vec![0.0; w.numel()];
    gemm_tn(rows, row, d.co, &cols, dy.data(), &mut dw);
    let mut db = vec![0.0; d.co];
    for r in dy.data().chunks(d.co) {
        for (acc, v) in db.iter_mut().zip(r) {
            *acc += v;
        }
    }
    let mut dcols = vec![0.0; rows * row];
    gemm_nt(rows, row, d.co, dy.data(), w.data(), &mut dcols);
    let mut dx = vec![0.0; x.numel()];
    for bi in 0..d.b {
        for oi in 0..d.ho {
            for oj in 0..d.wo {
                let r = &dcols[((bi * d.ho + oi) * d.wo + oj) * row..][..row];
                for ki in 0..d.k {
                    let Some(ii) = tap(oi, ki, spec.stride, spec.padding, d.h) else {
                        continue;
                    };
                    for kj in 0..d.k {
                        let Some(jj) = tap(oj, kj, spec.stride, spec.padding, d.w) else {
                            continue;
                        };
                        let dst = &mut dx[((bi * d.h + ii) * d.w + jj) * d.ci..][..d.ci];
                        for (a, v) in dst.iter_mut().zip(&r[(ki * d.k + kj) * d.ci..][..d.ci]) {
                            *a += v;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![d.co], db),
    )
}

fn depthwise_dims(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, h, wd, c) = super::feature_dims(x.shape())?;
    let [k, k2, wc] = *w.shape() else {
        return Err(Error::invalid(
            "depthwise_conv2d",
            format!("weight must be (K, K, C), got {:?}", w.shape()),
        ));
    };
    if k != k2 || wc != c || bias.shape() != [c] {
        return Err(Error::shape("depthwise_conv2d", x.shape(), w.shape()));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!("depthwise kernel size must be odd, got {k}")));
    }
    Ok((b, h, wd, c, k))
}

/// Per-channel `K×K` convolution, stride 1, zero padding `K/2`.
pub fn depthwise_conv2d(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, h, wd, c, k) = depthwise_dims(x, w, bias)?;
    let pad = k / 2;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..wd {
                let o = &mut out[((bi * h + i) * wd + j) * c..][..c];
                o.copy_from_slice(bias.data());
                for ki in 0..k {
                    let Some(ii) = tap(i, ki, 1, pad, h) else { continue };
                    for kj in 0..k {
                        let Some(jj) = tap(j, kj, 1, pad, wd) else { continue };
                        let xr = &xd[((bi * h + ii) * wd + jj) * c..][..c];
                        let wr = &wdat[(ki * k + kj) * c..][..c];
                        for ((ov, xv), wv) in o.iter_mut().zip(xr).zip(wr) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn depthwise_conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, h, wd, c, k) = depthwise_dims(x, w, bias).expect("validated in forward");
    let pad = k / 2;
    let (xd, wdat, gd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..wd {
                let g = &gd[((bi * h + i) * wd + j) * c..][..c];
                for (acc, v) in db.iter_mut().zip(g) {
                    *acc += v;
                }
                for ki in 0..k {
                    let Some(ii) = tap(i, ki, 1, pad, h) else { continue };
                    for kj in 0..k {
                        let Some(jj) = tap(j, kj, 1, pad, wd) else { continue };
                        let base = ((bi * h + ii) * wd + jj) * c;
                        let wbase = (ki * k + kj) * c;
                        for ch in 0..c {
                            dx[base + ch] += wdat[wbase + ch] * g[ch];
                            dw[wbase + ch] += xd[base + ch] * g[ch];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![c], db),
    )
}

fn causal_dims(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let [b, n, c] = *x.shape() else {
        return Err(Error::invalid(
            "causal_conv1d",
            format!("input must be (B, N, C), got {:?}", x.shape()),
        ));
    };
    let [k, wc] = *w.shape() else {
        return Err(Error::invalid(
            "causal_conv1d",
            format!("weight must be (K, C), got {:?}", w.shape()),
        ));
    };
    if wc != c || bias.shape() != [c] {
        return Err(Error::shape("causal_conv1d", x.shape(), w.shape()));
    }
    Ok((b, n, c, k))
}

/// Per-channel 1D convolution with left-only padding `K-1`: the output at
/// `t` reads inputs `t-K+1 ..= t`.
pub fn causal_conv1d(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, n, c, k) = causal_dims(x, w, bias)?;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for t in 0..n {
            let o = &mut out[(bi * n + t) * c..][..c];
            o.copy_from_slice(bias.data());
            for s in 0..k {
                let Some(src) = (t + s).checked_sub(k - 1) else {
                    continue;
                };
                let xr = &xd[(bi * n + src) * c..][..c];
                for ((ov, xv), wv) in o.iter_mut().zip(xr).zip(&wdat[s * c..][..c]) {
                    *ov += wv * xv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn causal_conv1d_backward(x: &Tensor, w: &Tensor, bias: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b, n, c, k) = causal_dims(x, w, bias).expect("validated in forward");
    let (xd, wdat, gd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; c];
    for bi in 0..b {
        for t in 0..n {
            let g = &gd[(bi * n + t) * c..][..c];
            for (acc, v) in db.iter_mut().zip(g) {
                *acc += v;
            }
            for s in 0..k {
                let Some(src) = (t + s).checked_sub(k - 1) else {
                    continue;
                };
                for ch in 0..c {
                    dx[(bi * n + src) * c + ch] += wdat[s * c + ch] * g[ch];
                    dw[s * c + ch] += xd[(bi * n + src) * c + ch] * g[ch];
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![c], db),
    )
}

// ── reductions and indexing ─────────────────────────────────────────

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Mean over one axis; the axis is removed from the output shape.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::invalid(
            "mean_axis",
            format!("axis {axis} for shape {:?}", x.shape()),
        ));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..n {
            let src = &xd[(o * n + a) * inner..][..inner];
            for (acc, v) in out[o * inner..][..inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn mean_axis_backward(in_shape: &[usize], axis: usize, dy: &Tensor) -> Tensor {
    let (outer, n, inner) = split_axis(in_shape, axis);
    let inv = 1.0 / n as f64;
    let gd = dy.data();
    let mut dx = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for a in 0..n {
            for (d, g) in dx[(o * n + a) * inner..][..inner]
                .iter_mut()
                .zip(&gd[o * inner..][..inner])
            {
                *d = g * inv;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Selects `indices` along `axis`; indices may repeat.
pub fn gather(x: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    if axis >= x.rank() || indices.is_empty() {
        return Err(Error::invalid(
            "gather",
            format!("axis {axis} for shape {:?}", x.shape()),
        ));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(
            "gather",
            format!("index {bad} out of range for extent {n}"),
        ));
    }
    let xd = x.data();
    let m = indices.len();
    let mut out = vec![0.0; outer * m * inner];
    for o in 0..outer {
        for (a, &src) in indices.iter().enumerate() {
            out[(o * m + a) * inner..][..inner].copy_from_slice(&xd[(o * n + src) * inner..][..inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = m;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn gather_backward(in_shape: &[usize], axis: usize, indices: &[usize], dy: &Tensor) -> Tensor {
    let (outer, n, inner) = split_axis(in_shape, axis);
    let m = indices.len();
    let gd = dy.data();
    let mut dx = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for (a, &dst) in indices.iter().enumerate() {
            for (d, g) in dx[(o * n + dst) * inner..][..inner]
                .iter_mut()
                .zip(&gd[(o * m + a) * inner..][..inner])
            {
                *d += g;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Mean softmax cross-entropy of `(B, K)` logits against class indices.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    check_targets(logits, targets)?;
    check_finite("cross_entropy", logits)?;
    let k = logits.shape()[1];
    let total: f64 = logits
        .data()
        .chunks(k)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum();
    Ok(Tensor::scalar(total / targets.len() as f64))
}

fn check_targets(logits: &Tensor, targets: &[usize]) -> Result<()> {
    let [b, k] = *logits.shape() else {
        return Err(Error::invalid(
            "cross_entropy",
            format!("logits must be (B, K), got {:?}", logits.shape()),
        ));
    };
    if targets.len() != b || targets.iter().any(|&t| t >= k) {
        return Err(Error::invalid("cross_entropy", "targets do not match logits"));
    }
    Ok(())
}

pub(crate) fn cross_entropy_backward(logits: &Tensor, targets: &[usize], upstream: f64) -> Tensor {
    let k = logits.shape()[1];
    let mut probs = softmax_lastdim(logits).expect("validated in forward").to_vec();
    let scale = upstream / targets.len() as f64;
    for (row, &t) in probs.chunks_mut(k).zip(targets) {
        row[t] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::from_parts(logits.shape().to_vec(), probs)
}
