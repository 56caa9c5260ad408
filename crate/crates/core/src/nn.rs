//! Small layers shared by the encoder, quantizers and transducer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let mut sub = pb.sub(name);
        let w = sub.glorot("w", in_dim, out_dim);
        let b = bias.then(|| sub.zeros("b", &[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    /// `x: [m, in] -> [m, out]`
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, n) = g.dims(x);
        if n != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                got: n,
            });
        }
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization with a learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        let mut sub = pb.sub(name);
        Self {
            gain: sub.constant("gain", &[dim], 1.0),
            bias: sub.zeros("bias", &[dim]),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, T::of(LAYER_NORM_EPS));
        let gain = g.param(self.gain);
        let y = g.mul_row(n, gain)?;
        let bias = g.param(self.bias);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Swish,
    Relu,
}

impl Activation {
    pub const NAMES: [&'static str; 3] = ["swish", "relu", "none"];

    pub fn apply<T: Real>(self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Swish => g.swish(x),
            Activation::Relu => g.relu(x),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swish" => Ok(Activation::Swish),
            "relu" => Ok(Activation::Relu),
            "none" => Ok(Activation::None),
            other => Err(Error::UnknownName {
                kind: "activation",
                name: other.to_string(),
                choices: Self::NAMES.join(", "),
            }),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::None => "none",
            Activation::Swish => "swish",
            Activation::Relu => "relu",
        })
    }
}
