//! Every module's invariant suite, aggregated into one report.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::analysis::{model_cost, reference_row, verify_theorem1, RadiusMode};
use crate::block::{build_variant, BlockConfig, IwinBlock, PositionMode, Structure};
use crate::causal1d::{causality_suite, CausalMixer, Layout1D, LocalBranch};
use crate::error::Result;
use crate::interleave::{self, same_window, IndexMap, WindowLayout};
use crate::layers::{
    attention_core, dense_attention, iw_msa, iw_msa_with, window_msa, AttentionParams, DepthwiseConvParams, Downsample,
    LayerNorm, Linear, Mlp, PatchEmbed, PermutationPath,
};
use crate::params::{Bound, Init, ParamSink, ParamStore};
use crate::tensor::gradcheck::{check_param_gradients, ParamGradReport};
use crate::tensor::{Tape, Tensor, Var};

use super::RunReport;

/// Inverse permutation under test; [`interleave::restore`] in production.
pub type RestoreFn = fn(&Tensor, &WindowLayout) -> Result<Tensor>;

/// Largest grid side swept exhaustively.
pub const SWEEP_MAX: usize = 16;
const GRAD_TOLERANCE: f64 = 1e-4;
const ORACLE_TOLERANCE: f64 = 1e-10;

struct Outcome {
    passed: bool,
    detail: String,
    metrics: serde_json::Value,
}

pub fn verify_all() -> Result<RunReport> {
    verify_all_with(0, interleave::restore)
}

pub fn verify_all_with(seed: u64, restore: RestoreFn) -> Result<RunReport> {
    let start = Instant::now();
    let mut report = RunReport::new("verify-all", json!({ "seed": seed, "sweep_max": SWEEP_MAX }));
    let suites: [(&str, &dyn Fn() -> Result<Outcome>); 7] = [
        ("interleave_bijectivity", &|| bijectivity(seed, restore)),
        ("coset_law", &coset_law),
        ("theorem_sweep", &theorem_sweep),
        ("oracle_equivalence", &|| oracle_equivalence(seed)),
        ("gradient_checks", &|| gradient_checks(seed)),
        ("causality", &|| causality(seed)),
        ("cost_table", &cost_table),
    ];
    report.metric("suites", suites.len());
    for (name, run) in suites {
        let t = Instant::now();
        let outcome = run()?;
        let mut metrics = outcome.metrics;
        metrics["seconds"] = json!(t.elapsed().as_secs_f64());
        report.metric(name, metrics);
        report.check(name, outcome.passed, outcome.detail);
    }
    Ok(report.finish(start))
}

/// Every `(H, W, M)` with `H, W ≤ max` and `M` dividing both.
pub fn sweep_layouts(max: usize) -> Vec<WindowLayout> {
    let mut out = Vec::new();
    for h in 1..=max {
        for w in 1..=max {
            for m in (1..=h.min(w)).filter(|m| h % m == 0 && w % m == 0) {
                out.push(WindowLayout::new(h, w, m).expect("divisible by construction"));
            }
        }
    }
    out
}

fn describe(l: &WindowLayout) -> String {
    format!("H={} W={} M={}", l.h(), l.w(), l.m())
}

fn bijectivity(seed: u64, restore: RestoreFn) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layouts = sweep_layouts(SWEEP_MAX);
    let tape = Tape::no_grad();
    let mut failures = Vec::new();
    for l in &layouts {
        let c = rng.random_range(1..=4);
        let x = Tensor::randn(&[2, l.h(), l.w(), c], 1.0, &mut rng);
        let map = IndexMap::new(*l);
        let shuffled = interleave::rearrange(&x, l)?;
        let gathered = interleave::rearrange_by_index(&tape.leaf(x.clone()), &map)?;
        let ok = map.is_bijection()
            && map.round_trips()
            && restore(&shuffled, l)?.bit_eq(&x)
            && gathered.value().bit_eq(&shuffled);
        if !ok {
            failures.push(describe(l));
        }
    }
    Ok(Outcome {
        passed: failures.is_empty(),
        detail: match failures.first() {
            None => format!("{} layouts round-trip bit-exactly", layouts.len()),
            Some(f) => format!("{} of {} layouts fail, first {f}", failures.len(), layouts.len()),
        },
        metrics: json!({ "layouts": layouts.len(), "failures": failures.len() }),
    })
}

/// Compares the residue rule against the windows the permutation actually
/// produces, for every pair of positions.
fn coset_law() -> Result<Outcome> {
    let layouts = sweep_layouts(SWEEP_MAX);
    let mut pairs = 0u64;
    let mut failures = Vec::new();
    for l in &layouts {
        let (h, w, m) = (l.h(), l.w(), l.m());
        let ids = Tensor::from_fn(&[1, h, w, 1], |e| e as f64);
        let windows = interleave::window_partition(&interleave::rearrange(&ids, l)?, l)?;
        let mut window_of = vec![usize::MAX; h * w];
        for (slot, &id) in windows.data().iter().enumerate() {
            window_of[id as usize] = slot / (m * m);
        }
        let mut ok = true;
        for a in 0..h * w {
            for b in 0..h * w {
                let rule = same_window((a / w, a % w), (b / w, b % w), l)?;
                ok &= rule == (window_of[a] == window_of[b]);
            }
        }
        pairs += (h * w * h * w) as u64;
        if !ok {
            failures.push(describe(l));
        }
    }
    Ok(Outcome {
        passed: failures.is_empty(),
        detail: match failures.first() {
            None => format!("{pairs} pairs over {} layouts agree", layouts.len()),
            Some(f) => format!("{} layouts disagree, first {f}", failures.len()),
        },
        metrics: json!({ "layouts": layouts.len(), "pairs": pairs, "failures": failures.len() }),
    })
}

fn theorem_sweep() -> Result<Outcome> {
    let mut covered = 0usize;
    let mut failures = Vec::new();
    for l in sweep_layouts(SWEEP_MAX) {
        for k in 1..=SWEEP_MAX {
            if k * l.m() < l.h().max(l.w()) {
                continue;
            }
            covered += 1;
            let r = verify_theorem1(&l, k, RadiusMode::Lemma)?;
            if !(r.passed && r.witness_certifies_all) {
                failures.push(format!("{} K={k}", describe(&l)));
            }
        }
    }
    let small = verify_theorem1(&WindowLayout::new(8, 8, 2)?, 2, RadiusMode::Lemma)?;
    let counterexample = small.counterexample.filter(|_| !small.passed);
    Ok(Outcome {
        passed: failures.is_empty() && counterexample.is_some(),
        detail: format!(
            "{covered} layouts with K·M ≥ max(H, W), {} failing; 8x8 M=2 K=2 unreachable pair {:?}",
            failures.len(),
            counterexample
        ),
        metrics: json!({
            "covered": covered,
            "failures": failures,
            "counterexample_8x8_m2_k2": counterexample,
        }),
    })
}

/// Dense attention over all `H·W` tokens where each query only sees its coset.
fn masked_dense<'t>(x: &Var<'t>, l: &WindowLayout, a: &AttentionParams, p: &Bound<'t>) -> Result<Var<'t>> {
    let [b, h, w, c] = *x.shape() else {
        unreachable!("4-D input")
    };
    let n = h * w;
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            allowed[q * n + k] = same_window((q / w, q % w), (k / w, k % w), l)?;
        }
    }
    attention_core(&x.reshape(&[b, n, c])?, a, p, Some(&allowed))?.reshape(&[b, h, w, c])
}

fn oracle_equivalence(seed: u64) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let tape = Tape::no_grad();
    for (h, w, m) in [
        (8, 8, 2),
        (8, 8, 4),
        (4, 8, 2),
        (6, 6, 3),
        (8, 4, 4),
        (2, 2, 1),
        (8, 8, 1),
    ] {
        let mut store = ParamStore::new(seed ^ (h * 100 + w * 10 + m) as u64);
        let a = AttentionParams::new(&mut store, "a", 8, 2)?;
        randomize(&mut store, seed.wrapping_add(cases), 0.5)?;
        let l = WindowLayout::new(h, w, m)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100 + cases));
        let x = tape.leaf(Tensor::randn(&[2, h, w, 8], 1.0, &mut rng));
        let p = store.bind(&tape);
        let want = masked_dense(&x, &l, &a, &p)?;
        for path in [PermutationPath::Reshape, PermutationPath::IndexMap] {
            let got = iw_msa_with(&x, &l, &a, &p, path)?;
            worst = worst.max(got.value().max_abs_diff(want.value())?);
        }
        if h == w {
            let single = WindowLayout::new(h, w, h)?;
            let got = iw_msa(&x, &single, &a, &p)?;
            worst = worst.max(got.value().max_abs_diff(dense_attention(&x, &a, &p)?.value())?);
        }
        cases += 1;
    }
    Ok(Outcome {
        passed: worst < ORACLE_TOLERANCE,
        detail: format!("{cases} instances, max abs diff {worst:.3e}"),
        metrics: json!({ "cases": cases, "max_abs_diff": worst }),
    })
}

fn randomize(store: &mut ParamStore, seed: u64, std: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::randn(&shape, std, &mut rng))?;
    }
    Ok(())
}

/// Checks `forward` with its input registered as one more parameter, so a
/// single sweep covers input and weight gradients. The scalar is a random
/// projection of the output.
fn grad_case<L, B, F>(seed: u64, input: &[usize], build: B, forward: F) -> Result<ParamGradReport>
where
    B: FnOnce(&mut ParamStore) -> Result<L>,
    F: for<'t> Fn(&L, &Var<'t>, &Bound<'t>) -> Result<Var<'t>>,
{
    let mut store = ParamStore::new(seed);
    let x = store.param("input", input, Init::Normal(1.0));
    let layer = build(&mut store)?;
    randomize(&mut store, seed ^ 0x5eed, 0.5)?;
    let tape = Tape::no_grad();
    let bound = store.bind(&tape);
    let n = forward(&layer, bound.get(x), &bound)?.value().numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let probe = Tensor::randn(&[n, 1], 1.0, &mut rng);
    check_param_gradients(&store, 12, 1e-5, GRAD_TOLERANCE, |tape, p| {
        let y = forward(&layer, p.get(x), p)?;
        Ok(y.reshape(&[1, n])?.matmul(&tape.leaf(probe.clone()))?.sum())
    })
}

fn toy_block(structure: Structure) -> BlockConfig {
    BlockConfig {
        dim: 8,
        heads: 2,
        window: 2,
        kernel: Some(3),
        mlp_ratio: 4.0,
        structure,
        position: PositionMode::None,
        pointwise_conv: false,
    }
}

/// Every layer and the three block wirings on `8×8×8` maps, `M = 2`, `K = 3`.
pub fn gradient_reports(seed: u64) -> Result<Vec<(String, ParamGradReport)>> {
    let map = [1, 8, 8, 8];
    let l = WindowLayout::new(8, 8, 2)?;
    let mut out = vec![
        (
            "linear".to_string(),
            grad_case(
                seed,
                &map,
                |s| Ok(Linear::new(s, "fc", 8, 5)),
                |f, x, p| f.forward(x, p),
            )?,
        ),
        (
            "layernorm".into(),
            grad_case(
                seed + 1,
                &map,
                |s| Ok(LayerNorm::new(s, "ln", 8)),
                |f, x, p| f.forward(x, p),
            )?,
        ),
        (
            "mlp".into(),
            grad_case(
                seed + 2,
                &map,
                |s| Mlp::new(s, "mlp", 8, 4.0),
                |f, x, p| f.forward(x, p),
            )?,
        ),
        (
            "window_msa".into(),
            grad_case(
                seed + 3,
                &[16, 4, 8],
                |s| AttentionParams::new(s, "a", 8, 2),
                |a, x, p| window_msa(x, a, p),
            )?,
        ),
        (
            "window_msa_relative_bias".into(),
            grad_case(
                seed + 4,
                &[16, 4, 8],
                |s| Ok(AttentionParams::new(s, "a", 8, 2)?.with_relative_bias(s, "a", 2)),
                |a, x, p| window_msa(x, a, p),
            )?,
        ),
        (
            "iw_msa".into(),
            grad_case(
                seed + 5,
                &map,
                |s| AttentionParams::new(s, "a", 8, 2),
                |a, x, p| iw_msa(x, &l, a, p),
            )?,
        ),
        (
            "iw_msa_index_map".into(),
            grad_case(
                seed + 6,
                &map,
                |s| AttentionParams::new(s, "a", 8, 2),
                |a, x, p| iw_msa_with(x, &l, a, p, PermutationPath::IndexMap),
            )?,
        ),
        (
            "depthwise_conv".into(),
            grad_case(
                seed + 7,
                &map,
                |s| DepthwiseConvParams::new(s, "dw", 8, 3, false),
                |c, x, p| c.forward(x, p),
            )?,
        ),
        (
            "depthwise_conv_pointwise".into(),
            grad_case(
                seed + 8,
                &map,
                |s| DepthwiseConvParams::new(s, "dw", 8, 3, true),
                |c, x, p| c.forward(x, p),
            )?,
        ),
        (
            "downsample".into(),
            grad_case(
                seed + 9,
                &map,
                |s| Ok(Downsample::new(s, "down", 8)),
                |d, x, p| d.forward(x, p),
            )?,
        ),
        (
            "patch_embed".into(),
            grad_case(
                seed + 10,
                &[1, 16, 16, 3],
                |s| Ok(PatchEmbed::new(s, "stem", 8)),
                |e, x, p| e.forward(x, p),
            )?,
        ),
        (
            "causal_mixer".into(),
            grad_case(
                seed + 11,
                &[1, 9, 4],
                |s| CausalMixer::new(s, "mix", Layout1D::new(9, 3)?, 4, 2, 3, LocalBranch::Conv),
                |m, x, p| m.forward(x, p),
            )?,
        ),
    ];
    for (i, structure) in [Structure::S1, Structure::S2, Structure::S3].into_iter().enumerate() {
        out.push((
            format!("block_{structure:?}"),
            grad_case(
                seed + 20 + i as u64,
                &map,
                |s| IwinBlock::new(s, "blk", toy_block(structure)),
                |b, x, p| b.forward(x, 2, p),
            )?,
        ));
    }
    Ok(out)
}

fn gradient_checks(seed: u64) -> Result<Outcome> {
    let reports = gradient_reports(seed)?;
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = reports
        .iter()
        .filter(|(_, r)| !r.passed)
        .map(|(n, _)| n.as_str())
        .collect();
    Ok(Outcome {
        passed: failing.is_empty(),
        detail: format!(
            "{} cases, worst relative error {worst:.2e}, failing {failing:?}",
            reports.len()
        ),
        metrics: json!({
            "cases": reports.iter().map(|(n, r)| (n.clone(), json!(r.max_rel_error))).collect::<serde_json::Map<_, _>>(),
            "worst_rel_error": worst,
            "tolerance": GRAD_TOLERANCE,
        }),
    })
}

fn causality(seed: u64) -> Result<Outcome> {
    let mut instances = 0;
    let mut failures = Vec::new();
    for n in 1..=16 {
        for m in (1..=n).filter(|m| n % m == 0) {
            for k in [1, 3] {
                let r = causality_suite(n, m, k, LocalBranch::Conv, seed ^ (n * 31 + m * 7 + k) as u64)?;
                instances += 1;
                if !r.passed {
                    failures.push(format!("N={n} M={m} K={k} conv"));
                }
            }
        }
    }
    for n in [4, 9, 16] {
        let m = (n as f64).sqrt() as usize;
        let r = causality_suite(n, m, 3, LocalBranch::Attention, seed ^ n as u64)?;
        instances += 1;
        if !r.passed {
            failures.push(format!("N={n} M={m} attention"));
        }
    }
    Ok(Outcome {
        passed: failures.is_empty(),
        detail: format!(
            "{instances} instances, {} with a nonzero future-to-past entry",
            failures.len()
        ),
        metrics: json!({ "instances": instances, "failures": failures }),
    })
}

fn cost_table() -> Result<Outcome> {
    let mut rows = Vec::new();
    let mut passed = true;
    for variant in ["T", "S", "B", "L"] {
        for res in [224, 384, 512, 1024] {
            if reference_row(variant, res).is_none() {
                continue;
            }
            let r = model_cost(&build_variant(variant, res)?)?;
            passed &= r.matches_reference == Some(true);
            rows.push(json!({
                "variant": variant,
                "resolution": res,
                "params_m": r.params_m,
                "gflops": r.gflops,
                "reference": r.reference,
                "params_rel_diff": r.params_rel_diff,
                "flops_rel_diff": r.flops_rel_diff,
                "matches": r.matches_reference,
            }));
        }
    }
    Ok(Outcome {
        passed,
        detail: format!("{} published rows compared", rows.len()),
        metrics: json!({ "rows": rows }),
    })
}
