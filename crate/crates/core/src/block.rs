//! The transformer block, its wiring variants, and the four-stage backbone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interleave::WindowLayout;
use crate::layers::{
    iw_msa_with, AttentionParams, DepthwiseConvParams, Downsample, LayerNorm, Linear, Mlp, PatchEmbed, PermutationPath,
};
use crate::params::{Bound, Init, ParamId, ParamSink};
use crate::tensor::{feature_dims, Var};

/// How the attention and convolution branches are wired inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Structure {
    /// Both branches read the same normalized input and share one residual.
    #[default]
    S1,
    /// Attention residual first, then a separate convolution residual.
    S2,
    /// Convolution feeds attention through an extra layernorm.
    S3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionMode {
    #[default]
    None,
    /// Learned table added after patch embedding; tied to the training resolution.
    Absolute,
    /// Learned per-block attention bias; tied to the window size.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    /// Depthwise kernel size; `None` drops the convolution branch.
    pub kernel: Option<usize>,
    pub mlp_ratio: f64,
    #[serde(default)]
    pub structure: Structure,
    #[serde(default)]
    pub position: PositionMode,
    #[serde(default)]
    pub pointwise_conv: bool,
}

/// One transformer block: a token mixer (interleaved attention plus
/// depthwise convolution) and an MLP, each with a pre-norm residual.
#[derive(Debug, Clone, Copy)]
pub struct IwinBlock {
    pub config: BlockConfig,
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub conv: Option<DepthwiseConvParams>,
    /// S3 only: normalizes the convolution output before attention.
    pub norm_mid: Option<LayerNorm>,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl IwinBlock {
    pub fn new(sink: &mut impl ParamSink, name: &str, config: BlockConfig) -> Result<Self> {
        let dim = config.dim;
        let norm1 = LayerNorm::new(sink, &format!("{name}.norm1"), dim);
        let mut attn = AttentionParams::new(sink, &format!("{name}.attn"), dim, config.heads)?;
        if config.position == PositionMode::Relative {
            attn = attn.with_relative_bias(sink, &format!("{name}.attn"), config.window);
        }
        let conv = config
            .kernel
            .map(|k| DepthwiseConvParams::new(sink, &format!("{name}.dwconv"), dim, k, config.pointwise_conv))
            .transpose()?;
        let norm_mid = (config.structure == Structure::S3 && conv.is_some())
            .then(|| LayerNorm::new(sink, &format!("{name}.norm_mid"), dim));
        let norm2 = LayerNorm::new(sink, &format!("{name}.norm2"), dim);
        let mlp = Mlp::new(sink, &format!("{name}.mlp"), dim, config.mlp_ratio)?;
        Ok(Self {
            config,
            norm1,
            attn,
            conv,
            norm_mid,
            norm2,
            mlp,
        })
    }

    /// Runs the block with window side `window` (which may differ from the
    /// configured one; nothing in the mechanism depends on it).
    pub fn forward<'t>(&self, x: &Var<'t>, window: usize, p: &Bound<'t>) -> Result<Var<'t>> {
        self.forward_with(x, window, p, PermutationPath::Reshape)
    }

    pub fn forward_with<'t>(
        &self,
        x: &Var<'t>,
        window: usize,
        p: &Bound<'t>,
        path: PermutationPath,
    ) -> Result<Var<'t>> {
        let (_, h, w, _) = feature_dims(x.shape())?;
        let layout = WindowLayout::new(h, w, window)?;
        let attend = |v: &Var<'t>| iw_msa_with(v, &layout, &self.attn, p, path);
        let mixed = match (self.config.structure, &self.conv) {
            (_, None) => x.add(&attend(&self.norm1.forward(x, p)?)?)?,
            (Structure::S1, Some(conv)) => {
                let xn = self.norm1.forward(x, p)?;
                x.add(&attend(&xn)?)?.add(&conv.forward(&xn, p)?)?
            }
            (Structure::S2, Some(conv)) => {
                let y = x.add(&attend(&self.norm1.forward(x, p)?)?)?;
                y.add(&conv.forward(&self.norm1.forward(&y, p)?, p)?)?
            }
            (Structure::S3, Some(conv)) => {
                let c = conv.forward(&self.norm1.forward(x, p)?, p)?;
                let mid = self.norm_mid.expect("S3 with a conv branch has norm_mid");
                x.add(&attend(&mid.forward(&c, p)?)?)?
            }
        };
        mixed.add(&self.mlp.forward(&self.norm2.forward(&mixed, p)?, p)?)
    }
}

/// Full backbone description. Field names follow the per-stage table of the
/// architecture: patch dim, depths, heads, window, kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub kernels: [Option<usize>; 4],
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub resolution: usize,
    #[serde(default)]
    pub structure: Structure,
    #[serde(default)]
    pub position: PositionMode,
    #[serde(default)]
    pub pointwise_conv: bool,
}

/// Per-stage row of [`ModelConfig::stages`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub downsample_rate: usize,
    pub resolution: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub window: usize,
    pub kernel: Option<usize>,
}

/// Window side used at each input resolution.
pub fn window_for_resolution(resolution: usize) -> Option<usize> {
    match resolution {
        224 => Some(7),
        384 => Some(12),
        512 | 1024 => Some(16),
        _ => None,
    }
}

/// The T/S/B/L configurations, plus `tiny-test` for desk-scale runs.
pub fn build_variant(name: &str, resolution: usize) -> Result<ModelConfig> {
    let (embed_dim, depths, heads) = match name {
        "T" => (96, [2, 2, 6, 2], [3, 6, 12, 24]),
        "S" => (96, [2, 2, 18, 2], [3, 6, 12, 24]),
        "B" => (128, [2, 2, 18, 2], [4, 8, 16, 32]),
        "L" => (192, [2, 2, 18, 2], [6, 12, 24, 48]),
        "tiny-test" => {
            if resolution == 0 || !resolution.is_multiple_of(32) {
                return Err(Error::Config(format!(
                    "tiny-test needs a multiple of 32, got {resolution}"
                )));
            }
            let cfg = ModelConfig {
                name: name.into(),
                embed_dim: 16,
                depths: [1, 1, 1, 1],
                heads: [1, 2, 4, 8],
                window: resolution / 32,
                kernels: [Some(3), Some(3), Some(3), None],
                mlp_ratio: 4.0,
                num_classes: 4,
                resolution,
                structure: Structure::S1,
                position: PositionMode::None,
                pointwise_conv: false,
            };
            return Ok(cfg);
        }
        other => return Err(Error::Config(format!("unknown variant {other:?}"))),
    };
    let window = window_for_resolution(resolution)
        .ok_or_else(|| Error::Config(format!("no window rule for resolution {resolution}")))?;
    Ok(ModelConfig {
        name: format!("Iwin-{name}"),
        embed_dim,
        depths,
        heads,
        window,
        kernels: [Some(3), Some(3), Some(3), None],
        mlp_ratio: 4.0,
        num_classes: 1000,
        resolution,
        structure: Structure::S1,
        position: PositionMode::None,
        pointwise_conv: false,
    })
}

impl ModelConfig {
    pub fn dims(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|s| self.embed_dim << s)
    }

    pub fn stage_resolutions(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|s| self.resolution / (4 << s))
    }

    pub fn block_config(&self, stage: usize) -> BlockConfig {
        BlockConfig {
            dim: self.dims()[stage],
            heads: self.heads[stage],
            window: self.window,
            kernel: self.kernels[stage],
            mlp_ratio: self.mlp_ratio,
            structure: self.structure,
            position: self.position,
            pointwise_conv: self.pointwise_conv,
        }
    }

    pub fn stages(&self) -> Vec<StageSummary> {
        (0..4)
            .map(|s| StageSummary {
                stage: s + 1,
                downsample_rate: 4 << s,
                resolution: self.stage_resolutions()[s],
                dim: self.dims()[s],
                heads: self.heads[s],
                depth: self.depths[s],
                window: self.window,
                kernel: self.kernels[s],
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.window == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "embed_dim, window and num_classes must be positive".into(),
            ));
        }
        if self.kernels[3].is_some() {
            return Err(Error::Config("the last stage has no convolution branch".into()));
        }
        for (s, (&dim, &heads)) in self.dims().iter().zip(&self.heads).enumerate() {
            if heads == 0 || dim % heads != 0 {
                return Err(Error::Config(format!(
                    "stage {}: {heads} heads do not divide dim {dim}",
                    s + 1
                )));
            }
        }
        self.check_resolution(self.resolution, self.window)
    }

    /// Divisibility of every stage map by the window at `resolution`.
    pub fn check_resolution(&self, resolution: usize, window: usize) -> Result<()> {
        if resolution == 0 || !resolution.is_multiple_of(32) {
            return Err(Error::Layout(format!("resolution {resolution} is not divisible by 32")));
        }
        for s in 0..4 {
            let side = resolution / (4 << s);
            if window == 0 || !side.is_multiple_of(window) {
                return Err(Error::Layout(format!(
                    "stage {}: window {window} does not divide the {side}x{side} map",
                    s + 1
                )));
            }
        }
        Ok(())
    }

    /// True when both configurations build the same layers. Position tables
    /// are not compared: their shapes are checked when they are applied.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        let structural = |c: &ModelConfig| {
            (
                c.embed_dim,
                c.depths,
                c.heads,
                c.kernels,
                c.mlp_ratio.to_bits(),
                c.num_classes,
                c.structure,
                c.position,
                c.pointwise_conv,
            )
        };
        structural(self) == structural(other)
    }

    /// The same architecture at another input resolution, with the window
    /// chosen by the resolution rule.
    pub fn at_resolution(&self, resolution: usize) -> Result<ModelConfig> {
        let window = if self.name == "tiny-test" {
            resolution / 32
        } else {
            window_for_resolution(resolution)
                .ok_or_else(|| Error::Config(format!("no window rule for resolution {resolution}")))?
        };
        let cfg = ModelConfig {
            resolution,
            window,
            ..self.clone()
        };
        cfg.check_resolution(resolution, window)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub downsample: Option<Downsample>,
    pub blocks: Vec<IwinBlock>,
}

/// Instantiated backbone: parameter handles for every layer.
#[derive(Debug, Clone)]
pub struct IwinModel {
    pub config: ModelConfig,
    pub patch_embed: PatchEmbed,
    pub absolute_pos: Option<ParamId>,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
    pub head: Linear,
}

/// Logits plus the `(B, H, W, C)` shape leaving each stage.
#[derive(Debug)]
pub struct ForwardTrace<'t> {
    pub logits: Var<'t>,
    pub stage_shapes: Vec<Vec<usize>>,
}

impl IwinModel {
    pub fn new(sink: &mut impl ParamSink, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let patch_embed = PatchEmbed::new(sink, "patch_embed", config.embed_dim);
        let absolute_pos = (config.position == PositionMode::Absolute).then(|| {
            let side = config.stage_resolutions()[0];
            sink.param(
                "absolute_pos_embed",
                &[1, side, side, config.embed_dim],
                Init::Normal(0.02),
            )
        });
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let downsample =
                (s > 0).then(|| Downsample::new(sink, &format!("stages.{s}.downsample"), config.dims()[s - 1]));
            let blocks = (0..config.depths[s])
                .map(|b| IwinBlock::new(sink, &format!("stages.{s}.blocks.{b}"), config.block_config(s)))
                .collect::<Result<_>>()?;
            stages.push(Stage { downsample, blocks });
        }
        let last = config.dims()[3];
        Ok(Self {
            config: config.clone(),
            patch_embed,
            absolute_pos,
            stages,
            norm: LayerNorm::new(sink, "norm", last),
            head: Linear::new(sink, "head", last, config.num_classes),
        })
    }

    /// Forward pass under `run`, which may change resolution and window but
    /// must describe the same parameters this model was built with.
    pub fn forward<'t>(&self, image: &Var<'t>, run: &ModelConfig, p: &Bound<'t>) -> Result<Var<'t>> {
        Ok(self.forward_traced(image, run, p)?.logits)
    }

    pub fn forward_traced<'t>(&self, image: &Var<'t>, run: &ModelConfig, p: &Bound<'t>) -> Result<ForwardTrace<'t>> {
        if !self.config.same_architecture(run) {
            return Err(Error::Config(format!(
                "run configuration {} describes different layers than the built model {}",
                run.name, self.config.name
            )));
        }
        let (_, h, w, _) = feature_dims(image.shape())?;
        if h != w || h != run.resolution {
            return Err(Error::Layout(format!(
                "image is {h}x{w}, configuration expects {0}x{0}",
                run.resolution
            )));
        }
        run.check_resolution(run.resolution, run.window)?;
        let mut x = self.patch_embed.forward(image, p)?;
        if let Some(pos) = self.absolute_pos {
            let table = p.get(pos);
            if table.shape()[1..] != x.shape()[1..] {
                return Err(Error::Config(format!(
                    "absolute position table {:?} cannot be added to a {:?} map",
                    table.shape(),
                    x.shape()
                )));
            }
            x = x.add(table)?;
        }
        let mut stage_shapes = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(ds) = &stage.downsample {
                x = ds.forward(&x, p)?;
            }
            for block in &stage.blocks {
                x = block.forward(&x, run.window, p).map_err(|e| match e {
                    Error::Layout(msg) => Error::Layout(format!("stage {}: {msg}", s + 1)),
                    other => other,
                })?;
            }
            stage_shapes.push(x.shape().to_vec());
        }
        let (b, h, w, c) = feature_dims(x.shape())?;
        let pooled = x.reshape(&[b, h * w, c])?.mean_axis(1)?;
        let logits = self.head.forward(&self.norm.forward(&pooled, p)?, p)?;
        Ok(ForwardTrace { logits, stage_shapes })
    }
}
