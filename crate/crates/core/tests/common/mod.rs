//! Loop-level reference implementations. Nothing here goes through the
//! tensor engine: values are read out of a `ParamStore` and recomputed with
//! explicit index arithmetic.
#![allow(dead_code)]

use iwin_core::block::IwinBlock;
use iwin_core::layers::{AttentionParams, DepthwiseConvParams, LayerNorm, Linear, Mlp, LAYERNORM_EPS};
use iwin_core::{ParamId, ParamStore, Tensor, Var};

/// Row-major `(B, H, W, C)` feature map.
#[derive(Debug, Clone)]
pub struct Map {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Self {
            b: s[0],
            h: s[1],
            w: s[2],
            c: s[3],
            data: t.to_vec(),
        }
    }

    pub fn zeros(b: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            b,
            h,
            w,
            c,
            data: vec![0.0; b * h * w * c],
        }
    }

    pub fn idx(&self, b: usize, i: usize, j: usize, k: usize) -> usize {
        ((b * self.h + i) * self.w + j) * self.c + k
    }

    pub fn at(&self, b: usize, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(b, i, j, k)]
    }

    pub fn token(&self, b: usize, i: usize, j: usize) -> Vec<f64> {
        let s = self.idx(b, i, j, 0);
        self.data[s..s + self.c].to_vec()
    }

    pub fn set_token(&mut self, b: usize, i: usize, j: usize, v: &[f64]) {
        let s = self.idx(b, i, j, 0);
        self.data[s..s + self.c].copy_from_slice(v);
    }

    pub fn map_tokens(&self, out_c: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Map {
        let mut out = Map::zeros(self.b, self.h, self.w, out_c);
        for b in 0..self.b {
            for i in 0..self.h {
                for j in 0..self.w {
                    out.set_token(b, i, j, &f(&self.token(b, i, j)));
                }
            }
        }
        out
    }

    pub fn plus(&self, other: &Map) -> Map {
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        out
    }

    pub fn max_abs_diff(&self, t: &Tensor) -> f64 {
        assert_eq!(t.shape(), [self.b, self.h, self.w, self.c]);
        self.data
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn value(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).to_vec()
}

pub fn linear(store: &ParamStore, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = value(store, lin.weight);
    let b = value(store, lin.bias);
    (0..lin.out_dim)
        .map(|o| b[o] + (0..lin.in_dim).map(|i| x[i] * w[i * lin.out_dim + o]).sum::<f64>())
        .collect()
}

/// Two-pass mean and variance.
pub fn layernorm(store: &ParamStore, ln: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let g = value(store, ln.gamma);
    let be = value(store, ln.beta);
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(k, v)| (v - mean) * inv * g[k] + be[k])
        .collect()
}

/// Maclaurin series for erf; accurate to ~1e-15 for |z| < 3.
pub fn erf_series(z: f64) -> f64 {
    if z.abs() >= 3.0 {
        return erf_tail(z);
    }
    let mut term = z;
    let mut sum = z;
    let z2 = z * z;
    for n in 1..200 {
        term *= -z2 / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-18 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

/// Continued fraction for erfc beyond the series range.
fn erf_tail(z: f64) -> f64 {
    let x = z.abs();
    let mut f = 0.0;
    for k in (1..60).rev() {
        f = (k as f64 / 2.0) / (x + f);
    }
    let erfc = (-x * x).exp() / std::f64::consts::PI.sqrt() / (x + f);
    (1.0 - erfc).copysign(z)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

pub fn mlp(store: &ParamStore, m: &Mlp, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear(store, &m.fc1, x).into_iter().map(gelu).collect();
    linear(store, &m.fc2, &h)
}

/// Multi-head attention among `tokens`; `allowed(q, k)` masks keys.
pub fn attention(
    store: &ParamStore,
    a: &AttentionParams,
    tokens: &[Vec<f64>],
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let n = tokens.len();
    let d = a.dim / a.heads;
    let q: Vec<_> = tokens.iter().map(|t| linear(store, &a.q, t)).collect();
    let k: Vec<_> = tokens.iter().map(|t| linear(store, &a.k, t)).collect();
    let v: Vec<_> = tokens.iter().map(|t| linear(store, &a.v, t)).collect();
    let scale = 1.0 / (d as f64).sqrt();
    let mut mixed = vec![vec![0.0; a.dim]; n];
    for head in 0..a.heads {
        let r = head * d..(head + 1) * d;
        for qi in 0..n {
            let scores: Vec<Option<f64>> = (0..n)
                .map(|ki| allowed(qi, ki).then(|| r.clone().map(|e| q[qi][e] * k[ki][e]).sum::<f64>() * scale))
                .collect();
            let top = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - top).exp())).collect();
            let z: f64 = weights.iter().sum();
            for ki in 0..n {
                for e in r.clone() {
                    mixed[qi][e] += weights[ki] / z * v[ki][e];
                }
            }
        }
    }
    mixed.iter().map(|m| linear(store, &a.out, m)).collect()
}

/// Window attention over plain `m×m` tiles of the map, no permutation.
pub fn window_attention(store: &ParamStore, a: &AttentionParams, x: &Map, m: usize) -> Map {
    let mut out = Map::zeros(x.b, x.h, x.w, x.c);
    for b in 0..x.b {
        for wi in 0..x.h / m {
            for wj in 0..x.w / m {
                let pos: Vec<(usize, usize)> = (0..m * m).map(|t| (wi * m + t / m, wj * m + t % m)).collect();
                let toks: Vec<_> = pos.iter().map(|&(i, j)| x.token(b, i, j)).collect();
                let y = attention(store, a, &toks, |_, _| true);
                for (t, &(i, j)) in pos.iter().enumerate() {
                    out.set_token(b, i, j, &y[t]);
                }
            }
        }
    }
    out
}

/// Whether two positions share a window after interleaving, by direct
/// residue comparison.
pub fn congruent(p: (usize, usize), q: (usize, usize), hg: usize, wg: usize) -> bool {
    p.0 % hg == q.0 % hg && p.1 % wg == q.1 % wg
}

/// Interleaved window attention as dense attention with a residue mask.
pub fn masked_dense_attention(store: &ParamStore, a: &AttentionParams, x: &Map, m: usize) -> Map {
    let (hg, wg) = (x.h / m, x.w / m);
    let pos: Vec<(usize, usize)> = (0..x.h * x.w).map(|t| (t / x.w, t % x.w)).collect();
    let mut out = Map::zeros(x.b, x.h, x.w, x.c);
    for b in 0..x.b {
        let toks: Vec<_> = pos.iter().map(|&(i, j)| x.token(b, i, j)).collect();
        let y = attention(store, a, &toks, |qi, ki| congruent(pos[qi], pos[ki], hg, wg));
        for (t, &(i, j)) in pos.iter().enumerate() {
            out.set_token(b, i, j, &y[t]);
        }
    }
    out
}

/// Per-channel `k×k` convolution with zero padding `k/2`.
pub fn depthwise(store: &ParamStore, conv: &DepthwiseConvParams, x: &Map) -> Map {
    let k = conv.kernel;
    let r = (k / 2) as isize;
    let w = value(store, conv.weight);
    let bias = value(store, conv.bias);
    let mut out = Map::zeros(x.b, x.h, x.w, x.c);
    for b in 0..x.b {
        for i in 0..x.h {
            for j in 0..x.w {
                for ch in 0..x.c {
                    let mut acc = bias[ch];
                    for di in 0..k {
                        for dj in 0..k {
                            let si = i as isize + di as isize - r;
                            let sj = j as isize + dj as isize - r;
                            if si >= 0 && sj >= 0 && (si as usize) < x.h && (sj as usize) < x.w {
                                acc += w[(di * k + dj) * x.c + ch] * x.at(b, si as usize, sj as usize, ch);
                            }
                        }
                    }
                    let o = out.idx(b, i, j, ch);
                    out.data[o] = acc;
                }
            }
        }
    }
    match &conv.pointwise {
        Some(pw) => out.map_tokens(x.c, |t| linear(store, pw, t)),
        None => out,
    }
}

/// Dense convolution with weights `(k, k, Cin, Cout)`.
pub fn conv2d(x: &Map, w: &[f64], bias: &[f64], k: usize, cout: usize, stride: usize, pad: usize) -> Map {
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Map::zeros(x.b, ho, wo, cout);
    for b in 0..x.b {
        for oi in 0..ho {
            for oj in 0..wo {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for di in 0..k {
                        for dj in 0..k {
                            let si = (oi * stride + di) as isize - pad as isize;
                            let sj = (oj * stride + dj) as isize - pad as isize;
                            if si < 0 || sj < 0 || si as usize >= x.h || sj as usize >= x.w {
                                continue;
                            }
                            for ci in 0..x.c {
                                acc +=
                                    w[((di * k + dj) * x.c + ci) * cout + co] * x.at(b, si as usize, sj as usize, ci);
                            }
                        }
                    }
                    let o = out.idx(b, oi, oj, co);
                    out.data[o] = acc;
                }
            }
        }
    }
    out
}

/// Reference for the S1 block with explicit window side `m`.
pub fn block_s1(store: &ParamStore, blk: &IwinBlock, x: &Map, m: usize) -> Map {
    let xn = x.map_tokens(x.c, |t| layernorm(store, &blk.norm1, t));
    let mut mixed = x.plus(&masked_dense_attention(store, &blk.attn, &xn, m));
    if let Some(conv) = &blk.conv {
        mixed = mixed.plus(&depthwise(store, conv, &xn));
    }
    let ff = mixed.map_tokens(x.c, |t| mlp(store, &blk.mlp, &layernorm(store, &blk.norm2, t)));
    mixed.plus(&ff)
}

/// Replaces every parameter with seeded normal noise so that no bias or
/// affine term is trivially zero or one.
pub fn randomize(store: &mut ParamStore, seed: u64, std: f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::randn(&shape, std, &mut rng)).unwrap();
    }
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Central differences over a sample of entries of every parameter,
/// compared with tape gradients. Returns the worst relative error
/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-6)` over parameters.
pub fn param_gradcheck<F>(store: &ParamStore, per_param: usize, step: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t iwin_core::Tape, &iwin_core::Bound<'t>) -> Var<'t>,
{
    use iwin_core::Tape;
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let loss = f(&tape, &bound);
    let grads = tape.backward(&loss).unwrap();
    let eval = |s: &ParamStore| {
        let t = Tape::no_grad();
        let b = s.bind(&t);
        f(&t, &b).value().item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let analytic = grads.get(bound.get(id));
        let n = store.get(id).numel();
        let stride = (n / per_param).max(1);
        let (mut diff, mut scale, mut num_max) = (0.0_f64, 1e-6_f64, 0.0_f64);
        for e in (0..n).step_by(stride).take(per_param) {
            let mut probe = store.clone();
            let mut v = store.get(id).to_vec();
            v[e] += step;
            probe
                .set(id, Tensor::new(store.get(id).shape().to_vec(), v.clone()).unwrap())
                .unwrap();
            let fp = eval(&probe);
            v[e] -= 2.0 * step;
            probe
                .set(id, Tensor::new(store.get(id).shape().to_vec(), v).unwrap())
                .unwrap();
            let fm = eval(&probe);
            let num = (fp - fm) / (2.0 * step);
            let an = analytic.data()[e];
            diff = diff.max((an - num).abs());
            scale = scale.max(an.abs()).max(num.abs());
            num_max = num_max.max(num.abs());
        }
        if std::env::var_os("GRADCHECK_VERBOSE").is_some() {
            eprintln!("{}: diff {diff:e} scale {scale:e}", store.name(id));
        }
        let an_max = analytic.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if an_max < 1e-12 {
            // Structurally zero (e.g. key bias under softmax shift invariance):
            // the numeric side may only carry rounding noise.
            assert!(
                num_max < 1e-7,
                "{} has zero tape gradient but numeric {num_max:e}",
                store.name(id)
            );
            continue;
        }
        worst = worst.max(diff / scale);
    }
    worst
}

/// `Σ y ⊙ probe` as a scalar on `y`'s tape; a generic linear readout for
/// gradient checks.
pub fn readout<'t>(y: &Var<'t>, probe: &Tensor) -> Var<'t> {
    let n = probe.numel();
    let w = y.tape().leaf(probe.reshape(&[n, 1]).unwrap());
    y.reshape(&[1, n]).unwrap().matmul(&w).unwrap().sum()
}
