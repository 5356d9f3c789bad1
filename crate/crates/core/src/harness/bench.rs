//! Wall-clock micro-benchmarks. Each op is checked for correctness on the
//! benchmarked input before it is timed.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::module_flops;
use crate::error::{Error, Result};
use crate::interleave::{self, IndexMap, WindowLayout};
use crate::layers::{dense_attention, iw_msa, window_msa, AttentionParams, DepthwiseConvParams};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

use super::RunReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchOp {
    /// Rearrange followed by restore.
    Rearrange,
    /// Interleaved window attention against dense global attention.
    Attention,
    DepthwiseConv,
}

impl BenchOp {
    pub const ALL: [BenchOp; 3] = [BenchOp::Rearrange, BenchOp::Attention, BenchOp::DepthwiseConv];

    fn name(self) -> &'static str {
        match self {
            BenchOp::Rearrange => "rearrange",
            BenchOp::Attention => "attention",
            BenchOp::DepthwiseConv => "dwconv",
        }
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchOp::ALL.into_iter().find(|op| op.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown bench op {s:?}; expected rearrange, attention or dwconv"
            ))
        })
    }
}

/// Input geometry: a `(1, size, size, channels)` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchSizes {
    pub size: usize,
    pub channels: usize,
    pub window: usize,
    pub kernel: usize,
    pub heads: usize,
}

impl BenchSizes {
    pub fn default_for(op: BenchOp) -> Self {
        let size = match op {
            BenchOp::Rearrange => 224,
            BenchOp::Attention | BenchOp::DepthwiseConv => 56,
        };
        Self {
            size,
            channels: 96,
            window: 7,
            kernel: 7,
            heads: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct Timing {
    median_s: f64,
    min_s: f64,
    max_s: f64,
    repeats: usize,
}

fn time(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median_s = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    Ok(Timing {
        median_s,
        min_s: samples[0],
        max_s: samples[n - 1],
        repeats: n,
    })
}

/// Times `op` with the median over `repeats` runs.
pub fn bench(op: BenchOp, sizes: &BenchSizes, repeats: usize, seed: u64) -> Result<RunReport> {
    let start = Instant::now();
    let layout = WindowLayout::new(sizes.size, sizes.size, sizes.window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[1, sizes.size, sizes.size, sizes.channels], 1.0, &mut rng);
    let mut report = RunReport::new(
        "bench",
        serde_json::json!({ "op": op, "sizes": sizes, "repeats": repeats, "seed": seed }),
    );
    match op {
        BenchOp::Rearrange => bench_rearrange(&mut report, &x, &layout, repeats)?,
        BenchOp::Attention => bench_attention(&mut report, &x, &layout, sizes, repeats, seed)?,
        BenchOp::DepthwiseConv => bench_dwconv(&mut report, &x, sizes, repeats, seed)?,
    }
    Ok(report.finish(start))
}

/// Every op at its default sizes, merged into one report.
pub fn bench_all(repeats: usize, seed: u64) -> Result<RunReport> {
    let start = Instant::now();
    let mut report = RunReport::new(
        "bench",
        serde_json::json!({ "op": "all", "repeats": repeats, "seed": seed }),
    );
    for op in BenchOp::ALL {
        let sub = bench(op, &BenchSizes::default_for(op), repeats, seed)?;
        report.metric(op.name(), &sub.metrics);
        for c in sub.checks {
            report.check(&format!("{op}.{}", c.name), c.passed, c.detail);
        }
    }
    Ok(report.finish(start))
}

fn bench_rearrange(report: &mut RunReport, x: &Tensor, layout: &WindowLayout, repeats: usize) -> Result<()> {
    let shuffled = interleave::rearrange(x, layout)?;
    let back = interleave::restore(&shuffled, layout)?;
    let tape = Tape::no_grad();
    let gathered = interleave::rearrange_by_index(&tape.leaf(x.clone()), &IndexMap::new(*layout))?;
    report.check(
        "round_trip_exact",
        back.bit_eq(x),
        "restore(rearrange(x)) compared bitwise",
    );
    report.check(
        "matches_index_map",
        gathered.value().bit_eq(&shuffled),
        "reshape path against closed-form gather",
    );
    let t = time(repeats, || {
        let y = interleave::rearrange(x, layout)?;
        interleave::restore(&y, layout).map(drop)
    })?;
    report.metric("round_trip", t);
    report.metric("bytes_moved_per_pass", x.numel() * std::mem::size_of::<f64>());
    report.check(
        "timing_finite",
        t.median_s.is_finite(),
        format!("median {:.6} s", t.median_s),
    );
    Ok(())
}

fn bench_attention(
    report: &mut RunReport,
    x: &Tensor,
    layout: &WindowLayout,
    sizes: &BenchSizes,
    repeats: usize,
    seed: u64,
) -> Result<()> {
    let mut store = ParamStore::new(seed);
    let a = AttentionParams::new(&mut store, "attn", sizes.channels, sizes.heads)?;
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    let xv = tape.leaf(x.clone());

    // One coset gathered by hand and attended on its own must reproduce the
    // corresponding rows of the interleaved output.
    let y = iw_msa(&xv, layout, &a, &p)?;
    let c = sizes.channels;
    let coset = layout.coset((0, 0));
    let mut rows = Vec::with_capacity(coset.len() * c);
    for &(i, j) in &coset {
        rows.extend_from_slice(&x.data()[(i * layout.w() + j) * c..][..c]);
    }
    let direct = window_msa(&tape.leaf(Tensor::new(vec![1, coset.len(), c], rows)?), &a, &p)?;
    let mut err: f64 = 0.0;
    for (n, &(i, j)) in coset.iter().enumerate() {
        for ch in 0..c {
            err = err.max((direct.value().data()[n * c + ch] - y.value().get(&[0, i, j, ch])).abs());
        }
    }
    report.check(
        "iw_msa_matches_coset_attention",
        err < 1e-10,
        format!("max abs diff {err:.3e}"),
    );

    let iw = time(repeats, || iw_msa(&xv, layout, &a, &p).map(drop))?;
    let dense = time(repeats, || dense_attention(&xv, &a, &p).map(drop))?;
    let hw = (layout.h() * layout.w()) as f64;
    let m2 = (layout.m() * layout.m()) as f64;
    let c = c as f64;
    let iw_flops = 4.0 * hw * c * c + 2.0 * m2 * hw * c;
    let dense_flops = 4.0 * hw * c * c + 2.0 * hw * hw * c;
    report.metric("iw_msa", iw);
    report.metric("dense", dense);
    report.metric("measured_speedup", dense.median_s / iw.median_s);
    report.metric("score_work_ratio", m2 / hw);
    report.metric("flop_ratio", iw_flops / dense_flops);
    report.metric("flop_speedup", dense_flops / iw_flops);
    report.check(
        "timing_finite",
        iw.median_s.is_finite() && dense.median_s.is_finite(),
        format!("iw {:.4} s, dense {:.4} s", iw.median_s, dense.median_s),
    );
    Ok(())
}

fn bench_dwconv(report: &mut RunReport, x: &Tensor, sizes: &BenchSizes, repeats: usize, seed: u64) -> Result<()> {
    let mut store = ParamStore::new(seed);
    let conv = DepthwiseConvParams::new(&mut store, "conv", sizes.channels, sizes.kernel, false)?;
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    let xv = tape.leaf(x.clone());
    let y = conv.forward(&xv, &p)?;

    let (s, c, k) = (sizes.size, sizes.channels, sizes.kernel);
    let w = store.get(conv.weight);
    let r = (k / 2) as isize;
    let mut err: f64 = 0.0;
    for (i, j) in [(0, 0), (s / 2, s / 3), (s - 1, s - 1)] {
        for ch in [0, c - 1] {
            let mut acc = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let (ii, jj) = (i as isize + di, j as isize + dj);
                    if (0..s as isize).contains(&ii) && (0..s as isize).contains(&jj) {
                        let wk = w.get(&[(di + r) as usize, (dj + r) as usize, ch]);
                        acc += wk * x.get(&[0, ii as usize, jj as usize, ch]);
                    }
                }
            }
            err = err.max((acc - y.value().get(&[0, i, j, ch])).abs());
        }
    }
    report.check("matches_direct_sum", err < 1e-10, format!("max abs diff {err:.3e}"));

    let t = time(repeats, || conv.forward(&xv, &p).map(drop))?;
    let cost = module_flops(s, s, c, sizes.window, k);
    report.metric("dwconv", t);
    report.metric("conv_flops", cost.conv);
    report.metric("conv_share_of_module", cost.conv as f64 / cost.iwin_total as f64);
    report.metric("gflops_per_s", cost.conv as f64 / t.median_s / 1e9);
    report.check(
        "timing_finite",
        t.median_s.is_finite(),
        format!("median {:.6} s", t.median_s),
    );
    Ok(())
}
