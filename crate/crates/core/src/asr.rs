//! Encoder plus transducer head: the fine-tuned recognizer.

use serde::{Deserialize, Serialize};

use crate::dsp::FeatureTensor;
use crate::encoder::{EncoderConfig, MultiChannelEncoder};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{seeded_rng, ParamBuilder, ParamStore};
use crate::pretrain::derive_seed;
use crate::tensor::Real;
use crate::train::{apply_update, batch_gradients, spec_augment, AugmentPolicy, OptimConfig, OptimizerState, UpdateInfo};
use crate::transducer::{JointConfig, TransducerHead};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub spec_augment: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            spec_augment: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AsrModel {
    pub encoder: MultiChannelEncoder,
    pub head: TransducerHead,
}

impl AsrModel {
    /// Encoder parameters are named `encoder.*`, so a pre-trained store
    /// can be copied in with [`ParamStore::copy_prefix_from`].
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, enc: &EncoderConfig, joint: &JointConfig) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let mut pb = ParamBuilder::new(store, &mut rng);
        let encoder = MultiChannelEncoder::new(&mut pb, enc)?;
        let head = TransducerHead::new(&mut pb.sub("head"), enc.hidden, joint);
        Ok(Self { encoder, head })
    }

    pub fn loss<T: Real>(&self, g: &mut Graph<'_, T>, feats: &FeatureTensor, tokens: &[usize], seed: u64) -> Result<Var> {
        let mut rng = seeded_rng(seed);
        let out = self.encoder.encode(g, feats, None, Some(&mut rng))?;
        self.head.loss(g, out.fused, tokens)
    }

    pub fn decode<T: Real>(&self, g: &mut Graph<'_, T>, feats: &FeatureTensor) -> Result<Vec<usize>> {
        let out = self.encoder.encode(g, feats, None, None)?;
        self.head.greedy_decode(g, out.fused)
    }
}

/// One fine-tuning step over `(features, tokens)` pairs: optional
/// SpecAugment, mean transducer loss, clip, Adam.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    model: &AsrModel,
    store: &mut ParamStore<f32>,
    state: &mut OptimizerState<f32>,
    optim: &OptimConfig,
    augment: Option<&AugmentPolicy>,
    batch: &[(&FeatureTensor, &[usize])],
    seed: u64,
    parallel: bool,
) -> Result<(f64, UpdateInfo)> {
    let step = state.step as u64;
    let (loss, grads) = batch_gradients(store, batch.len(), parallel, |g, i| {
        let (feats, tokens) = batch[i];
        let s = derive_seed(seed, step, i as u64);
        match augment {
            Some(policy) => {
                let aug = spec_augment(feats, policy, &mut seeded_rng(derive_seed(s, 3, 0)));
                model.loss(g, &aug, tokens, s)
            }
            None => model.loss(g, feats, tokens, s),
        }
    })?;
    let info = apply_update(store, grads, state, optim)?;
    Ok((loss, info))
}
