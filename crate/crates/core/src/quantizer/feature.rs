use crate::dsp::FeatureTensor;
use crate::error::Result;
use crate::graph::{Axis, Graph, Var};
use crate::nn::{Activation, Linear};
use crate::params::ParamBuilder;
use crate::tensor::Real;

use super::{stacked_amplitude, stacked_phase, Quantize, Quantizer, QuantizerConfig, QuantizerDims};

/// Separate amplitude and phase quantizers, each with its own activation,
/// combined by a joint linear layer.
#[derive(Clone, Debug)]
pub struct FeatureQuantizer {
    dims: QuantizerDims,
    amplitude: Linear,
    phase: Linear,
    joint: Linear,
    amp_activation: Activation,
    phase_activation: Activation,
}

/// Intermediate outputs of [`FeatureQuantizer::forward_parts`].
pub struct FeatureParts {
    pub amplitude: Var,
    pub phase: Var,
    pub q: Var,
}

impl FeatureQuantizer {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &QuantizerConfig, dims: QuantizerDims) -> Result<Self> {
        let d = cfg.target_dim;
        Ok(Self {
            dims,
            amplitude: Linear::new(pb, "amplitude", dims.channels * dims.amp(), d, true),
            phase: Linear::new(pb, "phase", dims.channels * dims.phase(), d, true),
            joint: Linear::new(pb, "joint", 2 * d, d, true),
            amp_activation: cfg.amp_activation,
            phase_activation: cfg.phase_activation,
        })
    }

    pub fn forward_parts<T: Real>(&self, g: &mut Graph<'_, T>, feats: &FeatureTensor) -> Result<FeatureParts> {
        self.dims.check(feats)?;
        let amp_in = g.constant(stacked_amplitude(feats));
        let amp = self.amplitude.forward(g, amp_in)?;
        let amplitude = self.amp_activation.apply(g, amp);
        let phase_in = g.constant(stacked_phase(feats));
        let ph = self.phase.forward(g, phase_in)?;
        let phase = self.phase_activation.apply(g, ph);
        let both = g.concat(&[amplitude, phase], Axis::Cols)?;
        let q = self.joint.forward(g, both)?;
        Ok(FeatureParts { amplitude, phase, q })
    }
}

impl<T: Real> Quantize<T> for FeatureQuantizer {
    fn quantize(&self, g: &mut Graph<'_, T>, feats: &FeatureTensor) -> Result<Var> {
        Ok(self.forward_parts(g, feats)?.q)
    }
}

impl Quantizer for FeatureQuantizer {
    fn method(&self) -> &'static str {
        "feature"
    }
}
