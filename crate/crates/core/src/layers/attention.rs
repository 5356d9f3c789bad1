use crate::error::{Error, Result};
use crate::interleave::{self, IndexMap, WindowLayout};
use crate::params::{Bound, Init, ParamId, ParamSink};
use crate::tensor::{feature_dims, Var};

use super::linear::Linear;

/// Learned per-head bias indexed by the offset between two tokens of an
/// `M×M` window. Only used by the relative-position ablation.
#[derive(Debug, Clone, Copy)]
pub struct RelativeBias {
    pub table: ParamId,
    pub window: usize,
}

impl RelativeBias {
    /// Table row for the offset between tokens `a` and `b` of the window.
    fn indices(window: usize) -> Vec<usize> {
        let n = window * window;
        let span = 2 * window - 1;
        let mut idx = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                let di = a / window + window - 1 - b / window;
                let dj = a % window + window - 1 - b % window;
                idx.push(di * span + dj);
            }
        }
        idx
    }

    /// `(heads, M², M²)` bias for the current window size.
    fn bias<'t>(&self, p: &Bound<'t>, heads: usize, tokens: usize) -> Result<Var<'t>> {
        if tokens != self.window * self.window {
            return Err(Error::Config(format!(
                "relative position table was built for {0}x{0} windows, got {tokens} tokens",
                self.window
            )));
        }
        p.get(self.table)
            .gather(0, &Self::indices(self.window))?
            .reshape(&[tokens, tokens, heads])?
            .permute(&[2, 0, 1])
    }
}

/// Multi-head self-attention weights for one layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub relative_bias: Option<RelativeBias>,
}

impl AttentionParams {
    pub fn new(sink: &mut impl ParamSink, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide dim {dim}")));
        }
        Ok(Self {
            dim,
            heads,
            q: Linear::new(sink, &format!("{name}.q"), dim, dim),
            k: Linear::new(sink, &format!("{name}.k"), dim, dim),
            v: Linear::new(sink, &format!("{name}.v"), dim, dim),
            out: Linear::new(sink, &format!("{name}.proj"), dim, dim),
            relative_bias: None,
        })
    }

    /// Adds a relative-position bias table sized for `window×window` windows.
    pub fn with_relative_bias(mut self, sink: &mut impl ParamSink, name: &str, window: usize) -> Self {
        let span = 2 * window - 1;
        let table = sink.param(
            &format!("{name}.relative_position_bias_table"),
            &[span * span, self.heads],
            Init::Normal(0.02),
        );
        self.relative_bias = Some(RelativeBias { table, window });
        self
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Attention over each row group of `x: (nW, N, C)`.
///
/// `allowed`, when given, is an `N×N` row-major mask of key positions each
/// query may see.
pub(crate) fn attention_core<'t>(
    x: &Var<'t>,
    a: &AttentionParams,
    p: &Bound<'t>,
    allowed: Option<&[bool]>,
) -> Result<Var<'t>> {
    let [nw, n, c] = *x.shape() else {
        return Err(Error::invalid(
            "window_msa",
            format!("expected (nW, N, C), got {:?}", x.shape()),
        ));
    };
    if c != a.dim {
        return Err(Error::Config(format!(
            "attention built for dim {}, input has {c}",
            a.dim
        )));
    }
    let (h, d) = (a.heads, a.head_dim());
    let split =
        |lin: &Linear| -> Result<Var<'t>> { lin.forward(x, p)?.reshape(&[nw, n, h, d])?.permute(&[0, 2, 1, 3]) };
    let q = split(&a.q)?;
    let k = split(&a.k)?;
    let v = split(&a.v)?;
    let mut scores = q.matmul(&k.transpose_last()?)?.scale(1.0 / (d as f64).sqrt());
    if let Some(rel) = &a.relative_bias {
        scores = scores.add(&rel.bias(p, h, n)?)?;
    }
    let weights = match allowed {
        Some(mask) => scores.masked_softmax_lastdim(mask)?,
        None => scores.softmax_lastdim()?,
    };
    let mixed = weights.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[nw, n, c])?;
    a.out.forward(&mixed, p)
}

/// Unmasked multi-head self-attention inside each window of `(nW, M·M, C)`.
pub fn window_msa<'t>(windows: &Var<'t>, a: &AttentionParams, p: &Bound<'t>) -> Result<Var<'t>> {
    attention_core(windows, a, p, None)
}

/// How the interleaving permutation is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PermutationPath {
    /// Reshape-transpose-reshape passes.
    #[default]
    Reshape,
    /// Gather along the closed-form index map.
    IndexMap,
}

/// Interleaved window attention: rearrange, window attention, restore.
pub fn iw_msa<'t>(x: &Var<'t>, layout: &WindowLayout, a: &AttentionParams, p: &Bound<'t>) -> Result<Var<'t>> {
    iw_msa_with(x, layout, a, p, PermutationPath::Reshape)
}

pub fn iw_msa_with<'t>(
    x: &Var<'t>,
    layout: &WindowLayout,
    a: &AttentionParams,
    p: &Bound<'t>,
    path: PermutationPath,
) -> Result<Var<'t>> {
    let map = (path == PermutationPath::IndexMap).then(|| IndexMap::new(*layout));
    let shuffled = match &map {
        None => interleave::rearrange_var(x, layout)?,
        Some(m) => interleave::rearrange_by_index(x, m)?,
    };
    let windows = interleave::window_partition_var(&shuffled, layout)?;
    let attended = window_msa(&windows, a, p)?;
    let merged = interleave::window_merge_var(&attended, layout)?;
    match &map {
        None => interleave::restore_var(&merged, layout),
        Some(m) => interleave::restore_by_index(&merged, m),
    }
}

/// Global self-attention over every position of a `(B, H, W, C)` map.
pub fn dense_attention<'t>(x: &Var<'t>, a: &AttentionParams, p: &Bound<'t>) -> Result<Var<'t>> {
    let (b, h, w, c) = feature_dims(x.shape())?;
    let flat = x.reshape(&[b, h * w, c])?;
    window_msa(&flat, a, p)?.reshape(&[b, h, w, c])
}
