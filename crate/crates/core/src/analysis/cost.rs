//! Closed-form FLOPs and parameter counts.
//!
//! One multiply-accumulate counts as one FLOP. Softmax, normalization,
//! activation and bias additions are not counted.

use serde::{Deserialize, Serialize};

use crate::block::{ModelConfig, PositionMode, Structure};
use crate::error::Result;
use crate::layers::{Mlp, PatchEmbed};

/// Token-mixer cost of one block on an `H×W×C` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub m: usize,
    pub k: usize,
    /// Query, key and value projections: `3HWC²`.
    pub qkv: u64,
    /// Scores and weighted sum inside `M×M` windows: `2M²HWC`.
    pub attn_core: u64,
    /// Output projection: `HWC²`.
    pub out_proj: u64,
    /// Depthwise `k×k` convolution: `k²HWC`.
    pub conv: u64,
    pub iwin_total: u64,
    /// Plain window attention on the same map, no convolution branch.
    pub swin_total: u64,
}

/// Token-mixer FLOPs; `k = 0` means no convolution branch.
pub fn module_flops(h: usize, w: usize, c: usize, m: usize, k: usize) -> ModuleCost {
    let hw = (h * w) as u64;
    let (c64, m64, k64) = (c as u64, m as u64, k as u64);
    let qkv = 3 * hw * c64 * c64;
    let attn_core = 2 * m64 * m64 * hw * c64;
    let out_proj = hw * c64 * c64;
    let conv = k64 * k64 * hw * c64;
    ModuleCost {
        h,
        w,
        c,
        m,
        k,
        qkv,
        attn_core,
        out_proj,
        conv,
        iwin_total: qkv + attn_core + out_proj + conv,
        swin_total: qkv + attn_core + out_proj,
    }
}

impl ModuleCost {
    /// Relative overhead of the convolution branch over plain window attention.
    pub fn overhead(&self) -> f64 {
        (self.iwin_total as f64 - self.swin_total as f64) / self.swin_total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: usize,
    pub resolution: usize,
    pub dim: usize,
    pub depth: usize,
    /// Token mixer of one block.
    pub mixer: ModuleCost,
    pub params: u64,
    pub flops: u64,
}

/// Published totals for one variant and resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub params_m: f64,
    pub gflops: f64,
}

pub const PARAM_TOLERANCE: f64 = 0.03;
pub const FLOP_TOLERANCE: f64 = 0.05;

/// Reference column for the variants with published classification totals.
pub fn reference_row(variant: &str, resolution: usize) -> Option<ReferenceRow> {
    let (params_m, gflops) = match (variant.trim_start_matches("Iwin-"), resolution) {
        ("T", 224) => (30.2, 4.7),
        ("S", 224) => (51.6, 9.0),
        ("S", 384) => (51.6, 27.7),
        ("S", 512) => (51.6, 52.0),
        ("S", 1024) => (51.6, 207.9),
        ("B", 224) => (91.2, 15.9),
        ("B", 384) => (91.2, 48.3),
        ("B", 512) => (91.3, 89.5),
        ("B", 1024) => (91.3, 358.2),
        ("L", 224) => (204.3, 35.4),
        ("L", 384) => (204.3, 106.6),
        _ => return None,
    };
    Some(ReferenceRow { params_m, gflops })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: String,
    pub resolution: usize,
    pub window: usize,
    pub params: u64,
    pub flops: u64,
    pub params_m: f64,
    pub gflops: f64,
    pub patch_embed: [u64; 2],
    pub stages: Vec<StageCost>,
    pub head: [u64; 2],
    pub reference: Option<ReferenceRow>,
    pub params_rel_diff: Option<f64>,
    pub flops_rel_diff: Option<f64>,
    /// Both totals within tolerance of the reference, when there is one.
    pub matches_reference: Option<bool>,
}

fn block_params(cfg: &ModelConfig, stage: usize) -> Result<u64> {
    let c = cfg.dims()[stage] as u64;
    let hidden = Mlp::hidden_width(cfg.dims()[stage], cfg.mlp_ratio)? as u64;
    let norms = 2 * 2 * c;
    let attn = 4 * (c * c + c);
    let mlp = c * hidden + hidden + hidden * c + c;
    let mut total = norms + attn + mlp;
    if let Some(k) = cfg.kernels[stage] {
        let k = k as u64;
        total += k * k * c + c;
        if cfg.pointwise_conv {
            total += c * c + c;
        }
        if cfg.structure == Structure::S3 {
            total += 2 * c;
        }
    }
    if cfg.position == PositionMode::Relative {
        let span = 2 * cfg.window as u64 - 1;
        total += span * span * cfg.heads[stage] as u64;
    }
    Ok(total)
}

/// Parameter count from the closed form.
pub fn param_count(cfg: &ModelConfig) -> Result<u64> {
    Ok(model_cost(cfg)?.params)
}

/// Whole-model totals with a per-stage breakdown, at `cfg.resolution`.
pub fn model_cost(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let c0 = cfg.embed_dim as u64;
    let patch_in = (PatchEmbed::PATCH * PatchEmbed::PATCH * PatchEmbed::IN_CHANNELS) as u64;
    let side0 = cfg.stage_resolutions()[0] as u64;
    let mut patch_params = patch_in * c0 + c0 + 2 * c0;
    if cfg.position == PositionMode::Absolute {
        patch_params += side0 * side0 * c0;
    }
    let patch_embed = [patch_params, side0 * side0 * patch_in * c0];

    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        let (dim, side) = (cfg.dims()[s], cfg.stage_resolutions()[s]);
        let (c, hw) = (dim as u64, (side * side) as u64);
        let hidden = Mlp::hidden_width(dim, cfg.mlp_ratio)? as u64;
        let mixer = module_flops(side, side, dim, cfg.window, cfg.kernels[s].unwrap_or(0));
        let pointwise = if cfg.pointwise_conv && cfg.kernels[s].is_some() {
            hw * c * c
        } else {
            0
        };
        let block_flops = mixer.iwin_total + pointwise + 2 * hw * c * hidden;
        let depth = cfg.depths[s] as u64;
        let mut params = depth * block_params(cfg, s)?;
        let mut flops = depth * block_flops;
        if s > 0 {
            let cin = cfg.dims()[s - 1] as u64;
            params += 9 * cin * c + c + 2 * c;
            flops += hw * 9 * cin * c;
        }
        stages.push(StageCost {
            stage: s + 1,
            resolution: side,
            dim,
            depth: cfg.depths[s],
            mixer,
            params,
            flops,
        });
    }

    let (c3, classes) = (cfg.dims()[3] as u64, cfg.num_classes as u64);
    let head = [2 * c3 + c3 * classes + classes, c3 * classes];
    let params = patch_embed[0] + stages.iter().map(|s| s.params).sum::<u64>() + head[0];
    let flops = patch_embed[1] + stages.iter().map(|s| s.flops).sum::<u64>() + head[1];
    let params_m = params as f64 / 1e6;
    let gflops = flops as f64 / 1e9;
    let reference = reference_row(&cfg.name, cfg.resolution);
    let params_rel_diff = reference.map(|r| (params_m - r.params_m) / r.params_m);
    let flops_rel_diff = reference.map(|r| (gflops - r.gflops) / r.gflops);
    let matches_reference = params_rel_diff
        .zip(flops_rel_diff)
        .map(|(p, f)| p.abs() <= PARAM_TOLERANCE && f.abs() <= FLOP_TOLERANCE);
    Ok(CostReport {
        variant: cfg.name.clone(),
        resolution: cfg.resolution,
        window: cfg.window,
        params,
        flops,
        params_m,
        gflops,
        patch_embed,
        stages,
        head,
        reference,
        params_rel_diff,
        flops_rel_diff,
        matches_reference,
    })
}

impl CostReport {
    /// One row per stage plus totals, with the reference column last.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("part,resolution,dim,depth,params,flops,reference\n");
        out.push_str(&format!(
            "patch_embed,,,,{},{},\n",
            self.patch_embed[0], self.patch_embed[1]
        ));
        for s in &self.stages {
            out.push_str(&format!(
                "stage{},{},{},{},{},{},\n",
                s.stage, s.resolution, s.dim, s.depth, s.params, s.flops
            ));
        }
        out.push_str(&format!("head,,,,{},{},\n", self.head[0], self.head[1]));
        let (rp, rf) = self.reference.map_or((String::new(), String::new()), |r| {
            (format!("{}M", r.params_m), format!("{}G", r.gflops))
        });
        out.push_str(&format!("total_params,{},,,{},,{}\n", self.resolution, self.params, rp));
        out.push_str(&format!("total_flops,{},,,,{},{}\n", self.resolution, self.flops, rf));
        out
    }
}
