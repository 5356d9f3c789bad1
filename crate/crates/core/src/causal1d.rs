//! Causal 1D variant of the mechanism for sequences.
//!
//! Token `t` of a length-`N` sequence joins the interleaved window
//! `t mod G` (with `G = N/M` windows of `M` tokens each). Attention inside a
//! window is masked in original time order, and a causal depthwise
//! convolution supplies the local links.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{attention_core, AttentionParams};
use crate::params::{Bound, Init, ParamId, ParamSink, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout1D {
    n: usize,
    m: usize,
}

impl Layout1D {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 || !n.is_multiple_of(m) {
            return Err(Error::Layout(format!("window {m} does not divide sequence length {n}")));
        }
        Ok(Self { n, m })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of interleaved windows.
    pub fn groups(&self) -> usize {
        self.n / self.m
    }

    pub fn group_of(&self, t: usize) -> usize {
        t % self.groups()
    }

    /// Members of window `g`, in time order.
    pub fn members(&self, g: usize) -> Vec<usize> {
        (g..self.n).step_by(self.groups()).collect()
    }

    /// Gather order that lays the windows out one after another.
    pub fn grouping(&self) -> Vec<usize> {
        (0..self.groups()).flat_map(|g| self.members(g)).collect()
    }

    pub fn ungrouping(&self) -> Vec<usize> {
        let mut inv = vec![0; self.n];
        for (slot, t) in self.grouping().into_iter().enumerate() {
            inv[t] = slot;
        }
        inv
    }

    /// `M×M` mask for one window: key `b` is visible to query `a` when its
    /// original position is not later. Identical for every window.
    pub fn causal_mask(&self) -> Vec<bool> {
        let pos = self.members(0);
        pos.iter().flat_map(|&q| pos.iter().map(move |&k| k <= q)).collect()
    }
}

fn sequence_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, n, c] => Ok((b, n, c)),
        _ => Err(Error::invalid("causal1d", format!("expected (B, N, C), got {shape:?}"))),
    }
}

/// Causal attention inside interleaved windows of `x: (B, N, C)`.
pub fn causal_iw_attention<'t>(
    x: &Var<'t>,
    layout: &Layout1D,
    p: &AttentionParams,
    bound: &Bound<'t>,
) -> Result<Var<'t>> {
    let (b, n, c) = sequence_dims(x.shape())?;
    if n != layout.n() {
        return Err(Error::Layout(format!(
            "layout is for length {}, input has {n}",
            layout.n()
        )));
    }
    let (g, m) = (layout.groups(), layout.m());
    let windows = x.gather(1, &layout.grouping())?.reshape(&[b * g, m, c])?;
    let mixed = attention_core(&windows, p, bound, Some(&layout.causal_mask()))?;
    mixed.reshape(&[b, n, c])?.gather(1, &layout.ungrouping())
}

/// Causal attention inside contiguous windows of `window` tokens.
pub fn causal_local_attention<'t>(
    x: &Var<'t>,
    window: usize,
    p: &AttentionParams,
    bound: &Bound<'t>,
) -> Result<Var<'t>> {
    let (b, n, c) = sequence_dims(x.shape())?;
    if window == 0 || n % window != 0 {
        return Err(Error::Layout(format!(
            "window {window} does not divide sequence length {n}"
        )));
    }
    let mask: Vec<bool> = (0..window).flat_map(|q| (0..window).map(move |k| k <= q)).collect();
    let windows = x.reshape(&[b * n / window, window, c])?;
    attention_core(&windows, p, bound, Some(&mask))?.reshape(&[b, n, c])
}

/// Per-channel causal convolution; `weight[K-1]` multiplies the current token.
#[derive(Debug, Clone, Copy)]
pub struct CausalConvParams {
    pub kernel: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl CausalConvParams {
    pub fn new(sink: &mut impl ParamSink, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::Config("causal kernel size must be at least 1".into()));
        }
        Ok(Self {
            kernel,
            weight: sink.param(&format!("{name}.weight"), &[kernel, channels], Init::FanIn(kernel)),
            bias: sink.param(&format!("{name}.bias"), &[channels], Init::Zeros),
        })
    }

    pub fn forward<'t>(&self, x: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        causal_depthwise_conv1d(x, p.get(self.weight), p.get(self.bias))
    }
}

pub fn causal_depthwise_conv1d<'t>(x: &Var<'t>, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
    x.causal_conv1d(weight, bias)
}

/// What runs alongside the interleaved attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalBranch {
    /// Causal depthwise convolution.
    #[default]
    Conv,
    /// Causal attention in contiguous windows; requires `M² = N`.
    Attention,
}

/// Interleaved causal attention plus a local causal branch, summed.
#[derive(Debug, Clone, Copy)]
pub struct CausalMixer {
    pub layout: Layout1D,
    pub attn: AttentionParams,
    pub branch: LocalBranch,
    pub conv: Option<CausalConvParams>,
    pub local: Option<AttentionParams>,
}

impl CausalMixer {
    pub fn new(
        sink: &mut impl ParamSink,
        name: &str,
        layout: Layout1D,
        dim: usize,
        heads: usize,
        kernel: usize,
        branch: LocalBranch,
    ) -> Result<Self> {
        let attn = AttentionParams::new(sink, &format!("{name}.attn"), dim, heads)?;
        let (conv, local) = match branch {
            LocalBranch::Conv => (
                Some(CausalConvParams::new(sink, &format!("{name}.conv"), dim, kernel)?),
                None,
            ),
            LocalBranch::Attention => {
                if layout.m() * layout.m() != layout.n() {
                    return Err(Error::Config(format!(
                        "the attention branch needs window² = length, got {}² vs {}",
                        layout.m(),
                        layout.n()
                    )));
                }
                (
                    None,
                    Some(AttentionParams::new(sink, &format!("{name}.local"), dim, heads)?),
                )
            }
        };
        Ok(Self {
            layout,
            attn,
            branch,
            conv,
            local,
        })
    }

    pub fn forward<'t>(&self, x: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let global = causal_iw_attention(x, &self.layout, &self.attn, p)?;
        let local = match (&self.conv, &self.local) {
            (Some(conv), _) => conv.forward(x, p)?,
            (None, Some(attn)) => causal_local_attention(x, self.layout.groups(), attn, p)?,
            (None, None) => unreachable!("constructor sets one branch"),
        };
        global.add(&local)
    }
}

/// Multiply-accumulate counts for one mixer call on a `(1, N, C)` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub projections: u64,
    /// Scores plus weighted sums inside interleaved windows.
    pub attention_scores: u64,
    pub local_branch: u64,
    pub total: u64,
    /// Full causal attention on the same input for comparison.
    pub dense_total: u64,
}

pub fn op_counts(n: usize, m: usize, c: usize, k: usize, branch: LocalBranch) -> OpCounts {
    let (n64, m64, c64) = (n as u64, m as u64, c as u64);
    let projections = 4 * n64 * c64 * c64;
    let attention_scores = 2 * n64 * m64 * c64;
    let local_branch = match branch {
        LocalBranch::Conv => k as u64 * n64 * c64,
        LocalBranch::Attention => projections + 2 * n64 * (n64 / m64) * c64,
    };
    OpCounts {
        n,
        m,
        c,
        projections,
        attention_scores,
        local_branch,
        total: projections + attention_scores + local_branch,
        dense_total: projections + 2 * n64 * n64 * c64,
    }
}

/// One `(input, output)` position pair of the causality suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub input: usize,
    pub output: usize,
    /// `max |∂out(output)/∂in(input)|` over channels.
    pub jacobian: f64,
    /// `max |Δout(output)|` after perturbing `in(input)`.
    pub perturbation: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalityReport {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub branch: LocalBranch,
    pub pairs: Vec<PairCheck>,
    /// Every future-to-past Jacobian block is exactly zero.
    pub jacobian_causal: bool,
    /// Perturbing a token never changes an earlier output.
    pub perturbation_causal: bool,
    /// Some past-to-future entry is nonzero. False only when nothing mixes
    /// tokens at all (one-token windows and `K = 1`).
    pub information_flows: bool,
    pub passed: bool,
}

const CHANNELS: usize = 4;
const HEADS: usize = 2;

/// Jacobian and perturbation causality checks on a random mixer.
pub fn causality_suite(n: usize, m: usize, k: usize, branch: LocalBranch, seed: u64) -> Result<CausalityReport> {
    let layout = Layout1D::new(n, m)?;
    let mut store = ParamStore::new(seed);
    let mixer = CausalMixer::new(&mut store, "mixer", layout, CHANNELS, HEADS, k, branch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::randn(&[1, n, CHANNELS], 1.0, &mut rng);

    let mut jac = vec![vec![0.0f64; n]; n];
    for (out_t, row) in jac.iter_mut().enumerate() {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xv = tape.leaf(x.clone());
        let y = mixer.forward(&xv, &p)?;
        let picked = y.gather(1, &[out_t])?.sum();
        let g = tape.backward(&picked)?.get(&xv);
        for (in_t, cell) in row.iter_mut().enumerate() {
            *cell = g.data()[in_t * CHANNELS..][..CHANNELS]
                .iter()
                .fold(0.0, |a, v| a.max(v.abs()));
        }
    }

    let eval = |input: &Tensor| -> Result<Tensor> {
        let tape = Tape::no_grad();
        let p = store.bind(&tape);
        Ok(mixer.forward(&tape.leaf(input.clone()), &p)?.into_value())
    };
    let base = eval(&x)?;
    let mut pert = vec![vec![0.0f64; n]; n];
    for in_t in 0..n {
        let mut moved = x.to_vec();
        for v in &mut moved[in_t * CHANNELS..][..CHANNELS] {
            *v += 0.5;
        }
        let y = eval(&Tensor::new(x.shape().to_vec(), moved)?)?;
        for (out_t, row) in pert.iter_mut().enumerate() {
            let a = &base.data()[out_t * CHANNELS..][..CHANNELS];
            let b = &y.data()[out_t * CHANNELS..][..CHANNELS];
            row[in_t] = a.iter().zip(b).fold(0.0, |acc, (u, v)| acc.max((u - v).abs()));
        }
    }

    let mut pairs = Vec::with_capacity(n * n);
    for input in 0..n {
        for output in 0..n {
            let (jacobian, perturbation) = (jac[output][input], pert[output][input]);
            let future = input > output;
            pairs.push(PairCheck {
                input,
                output,
                jacobian,
                perturbation,
                passed: !future || (jacobian == 0.0 && perturbation == 0.0),
            });
        }
    }
    let jacobian_causal = pairs.iter().filter(|c| c.input > c.output).all(|c| c.jacobian == 0.0);
    let perturbation_causal = pairs
        .iter()
        .filter(|c| c.input > c.output)
        .all(|c| c.perturbation == 0.0);
    let information_flows = pairs.iter().any(|c| c.input < c.output && c.jacobian > 0.0);
    Ok(CausalityReport {
        n,
        m,
        k,
        branch,
        pairs,
        jacobian_causal,
        perturbation_causal,
        information_flows,
        passed: jacobian_causal && perturbation_causal,
    })
}
