//! Neural layer primitives. Each layer is a plain struct of [`ParamId`]s
//! created against a [`ParamSink`]; forward passes read the bound values.
//!
//! [`ParamId`]: crate::params::ParamId
//! [`ParamSink`]: crate::params::ParamSink

mod attention;
mod conv;
mod linear;

pub(crate) use attention::attention_core;
pub use attention::{dense_attention, iw_msa, iw_msa_with, window_msa, AttentionParams, PermutationPath, RelativeBias};
pub use conv::{DepthwiseConvParams, Downsample, PatchEmbed};
pub use linear::{LayerNorm, Linear, Mlp, LAYERNORM_EPS};
