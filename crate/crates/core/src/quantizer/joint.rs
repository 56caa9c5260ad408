use crate::dsp::FeatureTensor;
use crate::error::Result;
use crate::graph::{Axis, Graph, Var};
use crate::nn::Linear;
use crate::params::ParamBuilder;
use crate::tensor::Real;

use super::{stacked_amplitude, stacked_phase, Quantize, Quantizer, QuantizerConfig, QuantizerDims};

/// One linear layer over every channel's amplitude and phase features.
#[derive(Clone, Debug)]
pub struct JointQuantizer {
    dims: QuantizerDims,
    linear: Linear,
}

impl JointQuantizer {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &QuantizerConfig, dims: QuantizerDims) -> Result<Self> {
        let input = dims.channels * dims.per_channel();
        Ok(Self {
            dims,
            linear: Linear::new(pb, "joint", input, cfg.target_dim, true),
        })
    }
}

impl<T: Real> Quantize<T> for JointQuantizer {
    fn quantize(&self, g: &mut Graph<'_, T>, feats: &FeatureTensor) -> Result<Var> {
        self.dims.check(feats)?;
        let amp = g.constant(stacked_amplitude(feats));
        let phase = g.constant(stacked_phase(feats));
        let x = g.concat(&[amp, phase], Axis::Cols)?;
        self.linear.forward(g, x)
    }
}

impl Quantizer for JointQuantizer {
    fn method(&self) -> &'static str {
        "joint"
    }
}
