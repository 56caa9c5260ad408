//! Contrastive-target quantizers. Each method is a [`Quantizer`] trait
//! object built by name through a [`QuantizerRegistry`].

mod channel;
mod feature;
mod joint;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use channel::ChannelQuantizer;
pub use feature::FeatureQuantizer;
pub use joint::JointQuantizer;

use crate::dsp::FeatureTensor;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::graph::Graph;
use crate::nn::Activation;
use crate::params::ParamBuilder;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    /// Registry name: "joint", "feature" or "channel".
    pub method: String,
    pub amp_activation: Activation,
    pub phase_activation: Activation,
    pub target_dim: usize,
    /// Width of the channel-attention scoring layer.
    pub attention_dim: usize,
    /// Channel quantizers share one linear layer across channels.
    pub share_channel_weights: bool,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            method: "feature".into(),
            amp_activation: Activation::Swish,
            phase_activation: Activation::None,
            target_dim: 256,
            attention_dim: 128,
            share_channel_weights: true,
        }
    }
}

/// Input geometry a quantizer is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizerDims {
    pub channels: usize,
    pub bins: usize,
}

impl QuantizerDims {
    pub fn amp(&self) -> usize {
        self.bins
    }

    pub fn phase(&self) -> usize {
        2 * self.bins
    }

    pub fn per_channel(&self) -> usize {
        3 * self.bins
    }

    fn check(&self, feats: &FeatureTensor) -> Result<()> {
        if feats.channels != self.channels {
            return Err(Error::DimensionMismatch {
                expected: self.channels,
                got: feats.channels,
            });
        }
        if feats.bins != self.bins {
            return Err(Error::DimensionMismatch {
                expected: self.per_channel(),
                got: feats.dim(),
            });
        }
        Ok(())
    }
}

/// Maps a feature tensor to targets `[T, target_dim]` in precision `T`.
pub trait Quantize<T: Real> {
    fn quantize(&self, g: &mut Graph<'_, T>, feats: &FeatureTensor) -> Result<Var>;
}

/// A quantization method usable in both training and verification
/// precision.
pub trait Quantizer: Quantize<f32> + Quantize<f64> + Send + Sync + fmt::Debug {
    fn method(&self) -> &'static str;
}

pub type QuantizerFactory =
    fn(&QuantizerConfig, QuantizerDims, &mut ParamBuilder<'_, f64>) -> Result<Box<dyn Quantizer>>;

/// Quantization methods by name.
pub struct QuantizerRegistry {
    entries: Vec<(&'static str, QuantizerFactory)>,
}

impl Default for QuantizerRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("joint", |cfg, dims, pb| Ok(Box::new(JointQuantizer::new(pb, cfg, dims)?)));
        r.register("feature", |cfg, dims, pb| Ok(Box::new(FeatureQuantizer::new(pb, cfg, dims)?)));
        r.register("channel", |cfg, dims, pb| Ok(Box::new(ChannelQuantizer::new(pb, cfg, dims)?)));
        r
    }
}

impl QuantizerRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    /// Adds or replaces a method.
    pub fn register(&mut self, name: &'static str, factory: QuantizerFactory) {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = factory,
            None => self.entries.push((name, factory)),
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn build(
        &self,
        cfg: &QuantizerConfig,
        dims: QuantizerDims,
        pb: &mut ParamBuilder<'_, f64>,
    ) -> Result<Box<dyn Quantizer>> {
        let factory = self
            .entries
            .iter()
            .find(|(n, _)| *n == cfg.method)
            .map(|(_, f)| *f)
            .ok_or_else(|| Error::UnknownName {
                kind: "quantizer",
                name: cfg.method.clone(),
                choices: self.names().join(", "),
            })?;
        let mut sub = pb.sub("quantizer");
        factory(cfg, dims, &mut sub)
    }
}

/// `[X_1^amp; ...; X_C^amp]` per frame: `[T, C*F]`.
pub(crate) fn stacked_amplitude<T: Real>(feats: &FeatureTensor) -> Tensor<T> {
    let mut data = Vec::with_capacity(feats.frames * feats.channels * feats.bins);
    for t in 0..feats.frames {
        for c in 0..feats.channels {
            data.extend(feats.amplitude_row(c, t).iter().map(|&x| T::of(x as f64)));
        }
    }
    Tensor::new(data, vec![feats.frames, feats.channels * feats.bins]).expect("shape")
}

/// `[X_1^phase; ...; X_C^phase]` per frame: `[T, 2*C*F]`.
pub(crate) fn stacked_phase<T: Real>(feats: &FeatureTensor) -> Tensor<T> {
    let mut data = Vec::with_capacity(feats.frames * feats.channels * 2 * feats.bins);
    for t in 0..feats.frames {
        for c in 0..feats.channels {
            data.extend(feats.phase_row(c, t).iter().map(|&x| T::of(x as f64)));
        }
    }
    Tensor::new(data, vec![feats.frames, 2 * feats.channels * feats.bins]).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, ParamStore};

    #[test]
    fn registry_builds_each_method_and_rejects_unknown() {
        let reg = QuantizerRegistry::default();
        assert_eq!(reg.names(), vec!["joint", "feature", "channel"]);
        let dims = QuantizerDims { channels: 2, bins: 3 };
        for name in reg.names() {
            let mut store = ParamStore::new();
            let mut rng = seeded_rng(0);
            let cfg = QuantizerConfig {
                method: name.into(),
                target_dim: 4,
                attention_dim: 3,
                ..Default::default()
            };
            let q = reg.build(&cfg, dims, &mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
            assert_eq!(q.method(), name);
            assert!(store.iter().all(|(_, n, _)| n.starts_with("quantizer.")));
        }
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let cfg = QuantizerConfig {
            method: "gumbel".into(),
            ..Default::default()
        };
        let err = reg.build(&cfg, dims, &mut ParamBuilder::new(&mut store, &mut rng)).unwrap_err();
        assert!(err.to_string().contains("joint, feature, channel"));
    }

    #[test]
    fn stacking_orders_channels_within_each_stream() {
        let f = FeatureTensor::new(
            2,
            1,
            1,
            vec![1.0, 2.0],
            vec![10.0, 11.0, 20.0, 21.0],
        )
        .unwrap();
        assert_eq!(stacked_amplitude::<f64>(&f).data(), &[1.0, 2.0]);
        assert_eq!(stacked_phase::<f64>(&f).data(), &[10.0, 11.0, 20.0, 21.0]);
    }
}
