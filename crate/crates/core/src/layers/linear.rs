use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamSink};
use crate::tensor::Var;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Affine map over the last axis, `x·W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(sink: &mut impl ParamSink, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: sink.param(&format!("{name}.weight"), &[in_dim, out_dim], Init::FanIn(in_dim)),
            bias: sink.param(&format!("{name}.bias"), &[out_dim], Init::Zeros),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.weight))?.add(p.get(self.bias))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(sink: &mut impl ParamSink, name: &str, dim: usize) -> Self {
        Self {
            gamma: sink.param(&format!("{name}.weight"), &[dim], Init::Ones),
            beta: sink.param(&format!("{name}.bias"), &[dim], Init::Zeros),
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        x.layernorm(p.get(self.gamma), p.get(self.beta), LAYERNORM_EPS)
    }
}

/// Two-layer perceptron `fc2(GELU(fc1(x)))` applied per position.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(sink: &mut impl ParamSink, name: &str, dim: usize, ratio: f64) -> Result<Self> {
        let hidden = Self::hidden_width(dim, ratio)?;
        Ok(Self {
            fc1: Linear::new(sink, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(sink, &format!("{name}.fc2"), hidden, dim),
        })
    }

    /// `ratio·dim`, which must be a positive integer.
    pub fn hidden_width(dim: usize, ratio: f64) -> Result<usize> {
        let hidden = ratio * dim as f64;
        if hidden.is_nan() || hidden < 1.0 || hidden.fract() != 0.0 {
            return Err(Error::Config(format!(
                "mlp ratio {ratio} times {dim} is not a positive integer"
            )));
        }
        Ok(hidden as usize)
    }

    pub fn forward<'t>(&self, x: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(x, p)?.gelu();
        self.fc2.forward(&h, p)
    }
}
