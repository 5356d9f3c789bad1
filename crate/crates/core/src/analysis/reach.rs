//! Reachability of every grid position from every other within one block.
//!
//! A block contributes two kinds of edges: attention edges join positions
//! that share an interleaved window, convolution edges join positions whose
//! row and column offsets both lie within the kernel radius. The verifier
//! asks whether every ordered pair is joined by a path of at most two edges
//! using at most one of each kind, in either order.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interleave::WindowLayout;

/// How a `K×K` kernel size turns into a reach radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadiusMode {
    /// `|Δ| ≤ K`, the direct-exchange condition taken literally.
    #[default]
    Lemma,
    /// `|Δ| ≤ ⌊K/2⌋`, what a `K×K` kernel actually touches.
    Physical,
}

impl RadiusMode {
    pub fn radius(self, k: usize) -> usize {
        match self {
            RadiusMode::Lemma => k,
            RadiusMode::Physical => k / 2,
        }
    }
}

impl FromStr for RadiusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lemma" => Ok(RadiusMode::Lemma),
            "physical" => Ok(RadiusMode::Physical),
            other => Err(Error::Config(format!("unknown radius mode {other:?} (lemma|physical)"))),
        }
    }
}

impl fmt::Display for RadiusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RadiusMode::Lemma => "lemma",
            RadiusMode::Physical => "physical",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Attn,
    Conv,
}

type Pos = (usize, usize);

/// Attention and convolution edges over an `H×W` grid.
#[derive(Debug, Clone, Copy)]
pub struct ReachabilityGraph {
    pub layout: WindowLayout,
    pub radius: usize,
}

impl ReachabilityGraph {
    pub fn new(layout: WindowLayout, radius: usize) -> Self {
        Self { layout, radius }
    }

    fn index(&self, (i, j): Pos) -> usize {
        i * self.layout.w() + j
    }

    fn pos(&self, n: usize) -> Pos {
        (n / self.layout.w(), n % self.layout.w())
    }

    /// Same interleaved window: equal residues modulo the window grid.
    pub fn attn_edge(&self, p: Pos, q: Pos) -> bool {
        let (hg, wg) = (self.layout.hg(), self.layout.wg());
        p.0 % hg == q.0 % hg && p.1 % wg == q.1 % wg
    }

    pub fn conv_edge(&self, p: Pos, q: Pos) -> bool {
        p.0.abs_diff(q.0) <= self.radius && p.1.abs_diff(q.1) <= self.radius
    }

    pub fn edge(&self, kind: EdgeKind, p: Pos, q: Pos) -> bool {
        match kind {
            EdgeKind::Attn => self.attn_edge(p, q),
            EdgeKind::Conv => self.conv_edge(p, q),
        }
    }

    pub fn attn_neighbors(&self, p: Pos) -> Vec<Pos> {
        self.layout.coset(p)
    }

    pub fn conv_neighbors(&self, (i, j): Pos) -> Vec<Pos> {
        let r = self.radius;
        let rows = i.saturating_sub(r)..=(i + r).min(self.layout.h() - 1);
        let cols = j.saturating_sub(r)..=(j + r).min(self.layout.w() - 1);
        rows.flat_map(|a| cols.clone().map(move |b| (a, b))).collect()
    }

    /// The attention cliques, one per interleaved window.
    pub fn cliques(&self) -> Vec<Vec<Pos>> {
        let (hg, wg) = (self.layout.hg(), self.layout.wg());
        (0..hg)
            .flat_map(|a| (0..wg).map(move |b| (a, b)))
            .map(|rep| self.layout.coset(rep))
            .collect()
    }

    /// Bitset of positions reachable from `source` with at most one edge of
    /// each kind.
    fn closure(&self, source: Pos, attn: &[Vec<u64>], conv: &[Vec<u64>]) -> Vec<u64> {
        let s = self.index(source);
        let mut reach: Vec<u64> = attn[s].iter().zip(&conv[s]).map(|(a, c)| a | c).collect();
        for (first, second) in [(attn, conv), (conv, attn)] {
            for t in ones(&first[s]) {
                for (r, w) in reach.iter_mut().zip(&second[t]) {
                    *r |= w;
                }
            }
        }
        reach
    }

    fn adjacency(&self, kind: EdgeKind) -> Vec<Vec<u64>> {
        let n = self.layout.num_positions();
        let words = n.div_ceil(64);
        (0..n)
            .map(|s| {
                let p = self.pos(s);
                let mut row = vec![0u64; words];
                let nbrs = match kind {
                    EdgeKind::Attn => self.attn_neighbors(p),
                    EdgeKind::Conv => self.conv_neighbors(p),
                };
                for q in nbrs {
                    let t = self.index(q);
                    row[t / 64] |= 1 << (t % 64);
                }
                row
            })
            .collect()
    }

    /// Fewest edges joining `p` to `q` under the path rules, or `None`.
    pub fn hops(&self, p: Pos, q: Pos) -> Option<usize> {
        if p == q {
            return Some(0);
        }
        if self.attn_edge(p, q) || self.conv_edge(p, q) {
            return Some(1);
        }
        let via_attn = self.attn_neighbors(p).into_iter().any(|t| self.conv_edge(t, q));
        let via_conv = || self.conv_neighbors(p).into_iter().any(|t| self.attn_edge(t, q));
        (via_attn || via_conv()).then_some(2)
    }
}

fn ones(words: &[u64]) -> impl Iterator<Item = usize> + '_ {
    words.iter().enumerate().flat_map(|(w, &bits)| {
        let mut b = bits;
        std::iter::from_fn(move || {
            (b != 0).then(|| {
                let t = b.trailing_zeros() as usize;
                b &= b - 1;
                w * 64 + t
            })
        })
    })
}

/// Two-hop route: an attention hop into `via`, then a convolution hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReachabilityWitness {
    pub from: Pos,
    pub to: Pos,
    pub via: Pos,
    pub hops: [EdgeKind; 2],
}

impl ReachabilityWitness {
    /// Whether both hops are edges of `graph`.
    pub fn certifies(&self, graph: &ReachabilityGraph) -> bool {
        graph.edge(self.hops[0], self.from, self.via) && graph.edge(self.hops[1], self.via, self.to)
    }
}

/// The constructive intermediate: same residues as `p1`, same window-grid
/// block as `p2`.
pub fn witness(p1: Pos, p2: Pos, layout: &WindowLayout) -> Result<ReachabilityWitness> {
    layout.check(p1)?;
    layout.check(p2)?;
    let (hg, wg) = (layout.hg(), layout.wg());
    let via = (p1.0 % hg + hg * (p2.0 / hg), p1.1 % wg + wg * (p2.1 / wg));
    if via.0 % hg != p1.0 % hg || via.1 % wg != p1.1 % wg {
        return Err(Error::Contract(format!("witness {via:?} left the coset of {p1:?}")));
    }
    if via.0.abs_diff(p2.0) >= hg || via.1.abs_diff(p2.1) >= wg {
        return Err(Error::Contract(format!(
            "witness {via:?} is not within one window grid of {p2:?}"
        )));
    }
    Ok(ReachabilityWitness {
        from: p1,
        to: p2,
        via,
        hops: [EdgeKind::Attn, EdgeKind::Conv],
    })
}

pub const REPORT_HEADER: &str = "Union graph of one block: attention edges join positions with equal \
residues modulo the window grid, convolution edges join positions within the radius in both axes. A pair \
is reachable if a path of at most two edges uses at most one edge of each kind, in either order. Under the \
parallel block wiring such a path is realized by two stacked blocks.";

const WITNESS_SAMPLES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachabilityReport {
    pub header: String,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub k: Option<usize>,
    pub mode: Option<RadiusMode>,
    pub radius: usize,
    /// `K·M ≥ max(H, W)`.
    pub condition_holds: Option<bool>,
    pub pairs: usize,
    pub reachable_pairs: usize,
    pub unreachable_pairs: usize,
    pub passed: bool,
    /// Largest hop count over reachable pairs.
    pub max_hops: usize,
    /// The attention-then-convolution construction alone covers every pair.
    pub witness_certifies_all: bool,
    pub witnesses: Vec<ReachabilityWitness>,
    /// First unreachable pair in row-major order of source, then target.
    pub counterexample: Option<[Pos; 2]>,
}

/// Verifies global exchange for kernel size `k` read through `mode`.
pub fn verify_theorem1(layout: &WindowLayout, k: usize, mode: RadiusMode) -> Result<ReachabilityReport> {
    if k == 0 {
        return Err(Error::Config("kernel size must be at least 1".into()));
    }
    let mut report = verify_with_radius(layout, mode.radius(k));
    report.k = Some(k);
    report.mode = Some(mode);
    report.condition_holds = Some(k * layout.m() >= layout.h().max(layout.w()));
    Ok(report)
}

/// Verifies global exchange for an explicit convolution radius.
pub fn verify_with_radius(layout: &WindowLayout, radius: usize) -> ReachabilityReport {
    let graph = ReachabilityGraph::new(*layout, radius);
    let n = layout.num_positions();
    let attn = graph.adjacency(EdgeKind::Attn);
    let conv = graph.adjacency(EdgeKind::Conv);

    struct Row {
        reachable: usize,
        first_missing: Option<usize>,
        max_hops: usize,
        witnesses_ok: bool,
    }
    let rows: Vec<Row> = (0..n)
        .into_par_iter()
        .map(|s| {
            let src = graph.pos(s);
            let reach = graph.closure(src, &attn, &conv);
            let reachable = reach.iter().map(|w| w.count_ones() as usize).sum();
            let first_missing = (0..n).find(|&t| reach[t / 64] >> (t % 64) & 1 == 0);
            let mut max_hops = 0;
            let mut witnesses_ok = true;
            for t in 0..n {
                let dst = graph.pos(t);
                if reach[t / 64] >> (t % 64) & 1 == 1 {
                    let one = t == s || attn[s][t / 64] >> (t % 64) & 1 == 1 || conv[s][t / 64] >> (t % 64) & 1 == 1;
                    max_hops = max_hops.max(if t == s {
                        0
                    } else if one {
                        1
                    } else {
                        2
                    });
                }
                witnesses_ok &= witness(src, dst, layout).is_ok_and(|w| w.certifies(&graph));
            }
            Row {
                reachable,
                first_missing,
                max_hops,
                witnesses_ok,
            }
        })
        .collect();

    let reachable_pairs: usize = rows.iter().map(|r| r.reachable).sum();
    let counterexample = rows
        .iter()
        .enumerate()
        .find_map(|(s, r)| r.first_missing.map(|t| [graph.pos(s), graph.pos(t)]));
    let passed = counterexample.is_none();
    let witnesses = if passed {
        let stride = (n * n / WITNESS_SAMPLES).max(1);
        (0..n * n)
            .step_by(stride)
            .take(WITNESS_SAMPLES)
            .filter_map(|e| witness(graph.pos(e / n), graph.pos(e % n), layout).ok())
            .collect()
    } else {
        Vec::new()
    };
    ReachabilityReport {
        header: REPORT_HEADER.to_string(),
        h: layout.h(),
        w: layout.w(),
        m: layout.m(),
        k: None,
        mode: None,
        radius,
        condition_holds: None,
        pairs: n * n,
        reachable_pairs,
        unreachable_pairs: n * n - reachable_pairs,
        passed,
        max_hops: rows.iter().map(|r| r.max_hops).max().unwrap_or(0),
        witness_certifies_all: rows.iter().all(|r| r.witnesses_ok),
        witnesses,
        counterexample,
    }
}

/// Smallest number of stacked blocks `d ≥ 1` for which a grown convolution
/// radius `d·⌊K/2⌋` gives global exchange. `None` when the radius cannot
/// grow (`⌊K/2⌋ = 0`) and the grid has more than one window.
///
/// A single-window layout reports 1: one attention hop already covers it.
pub fn erf_depth_bound(layout: &WindowLayout, k: usize) -> Result<Option<usize>> {
    if k == 0 {
        return Err(Error::Config("kernel size must be at least 1".into()));
    }
    if layout.is_single_window() {
        return Ok(Some(1));
    }
    let step = RadiusMode::Physical.radius(k);
    if step == 0 {
        return Ok(None);
    }
    let span = layout.h().max(layout.w());
    let mut d = 1;
    loop {
        if verify_with_radius(layout, d * step).passed {
            return Ok(Some(d));
        }
        if d * step >= span {
            // Convolution alone covers the grid at this radius.
            return Err(Error::Contract(format!("no depth found for {layout:?} with K={k}")));
        }
        d += 1;
    }
}
