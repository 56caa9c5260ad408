use crate::dsp::FeatureTensor;
use crate::encoder::feature_matrix;
use crate::error::{Error, Result};
use crate::graph::{Axis, Graph, Var};
use crate::nn::Linear;
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::{Real, Tensor};

use super::{Quantize, Quantizer, QuantizerConfig, QuantizerDims};

/// Per-channel quantizers weighted by an additive attention across
/// channels, then combined by a joint linear layer.
#[derive(Clone, Debug)]
pub struct ChannelQuantizer {
    dims: QuantizerDims,
    channel: Vec<Linear>,
    own: ParamId,
    others: ParamId,
    bias: ParamId,
    score: ParamId,
    joint: Linear,
}

/// Intermediate outputs of [`ChannelQuantizer::forward_parts`].
pub struct ChannelParts {
    /// `[T, C]`, each row a distribution over channels.
    pub weights: Var,
    /// Unweighted per-channel targets, each `[T, D]`.
    pub per_channel: Vec<Var>,
    /// Weighted per-channel targets, each `[T, D]`.
    pub weighted: Vec<Var>,
    pub q: Var,
}

impl ChannelQuantizer {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &QuantizerConfig, dims: QuantizerDims) -> Result<Self> {
        if dims.channels < 2 {
            return Err(Error::SingleChannel(dims.channels));
        }
        let (d, a, x) = (cfg.target_dim, cfg.attention_dim, dims.per_channel());
        let channel = if cfg.share_channel_weights {
            vec![Linear::new(pb, "channel", x, d, true)]
        } else {
            (0..dims.channels)
                .map(|c| Linear::new(pb, &format!("channel{c}"), x, d, true))
                .collect()
        };
        let mut att = pb.sub("attention");
        let own = att.glorot("own", x, a);
        let others = att.glorot("others", x, a);
        let bias = att.zeros("bias", &[a]);
        let score = att.uniform("score", &[a, 1], (3.0 / a as f64).sqrt());
        Ok(Self {
            dims,
            channel,
            own,
            others,
            bias,
            score,
            joint: Linear::new(pb, "joint", dims.channels * d, d, true),
        })
    }

    /// Attention weights `[T, C]`: for channel `c`,
    /// `score_c = w^T tanh(U X_c + H mean_{j != c} X_j + b)`, normalized by
    /// a softmax across channels.
    pub fn channel_attention<T: Real>(&self, g: &mut Graph<'_, T>, feats: &FeatureTensor) -> Result<Var> {
        if feats.channels < 2 {
            return Err(Error::SingleChannel(feats.channels));
        }
        self.dims.check(feats)?;
        let inputs: Vec<Tensor<T>> = (0..feats.channels).map(|c| feature_matrix(feats, c)).collect();
        let mut scores = Vec::with_capacity(feats.channels);
        for c in 0..feats.channels {
            let own_x = g.constant(inputs[c].clone());
            let other_x = g.constant(mean_of_other_inputs(&inputs, c));
            let u = g.param(self.own);
            let h = g.param(self.others);
            let a = g.matmul(own_x, u)?;
            let b = g.matmul(other_x, h)?;
            let s = g.add(a, b)?;
            let bias = g.param(self.bias);
            let s = g.add_row(s, bias)?;
            let s = g.tanh(s);
            let w = g.param(self.score);
            scores.push(g.matmul(s, w)?);
        }
        let scores = g.concat(&scores, Axis::Cols)?;
        Ok(g.softmax(scores))
    }

    pub fn forward_parts<T: Real>(&self, g: &mut Graph<'_, T>, feats: &FeatureTensor) -> Result<ChannelParts> {
        let weights = self.channel_attention(g, feats)?;
        let mut per_channel = Vec::with_capacity(feats.channels);
        let mut weighted = Vec::with_capacity(feats.channels);
        for c in 0..feats.channels {
            let layer = &self.channel[c.min(self.channel.len() - 1)];
            let x = g.constant(feature_matrix(feats, c));
            let qc = layer.forward(g, x)?;
            let a = g.slice(weights, Axis::Cols, c, 1)?;
            weighted.push(g.mul_col(qc, a)?);
            per_channel.push(qc);
        }
        let stacked = g.concat(&weighted, Axis::Cols)?;
        let q = self.joint.forward(g, stacked)?;
        Ok(ChannelParts {
            weights,
            per_channel,
            weighted,
            q,
        })
    }

    pub fn score_param(&self) -> ParamId {
        self.score
    }
}

fn mean_of_other_inputs<T: Real>(inputs: &[Tensor<T>], skip: usize) -> Tensor<T> {
    let n = inputs.len() - 1;
    let mut acc: Option<Vec<T>> = None;
    for (j, x) in inputs.iter().enumerate() {
        if j == skip {
            continue;
        }
        match acc.as_mut() {
            None => acc = Some(x.data().to_vec()),
            Some(a) => a.iter_mut().zip(x.data()).for_each(|(o, &v)| *o += v),
        }
    }
    let mut data = acc.expect("at least two channels");
    if n > 1 {
        let s = T::of(1.0 / n as f64);
        data.iter_mut().for_each(|v| *v *= s);
    }
    Tensor::new(data, inputs[0].shape().to_vec()).expect("same shape")
}

impl<T: Real> Quantize<T> for ChannelQuantizer {
    fn quantize(&self, g: &mut Graph<'_, T>, feats: &FeatureTensor) -> Result<Var> {
        Ok(self.forward_parts(g, feats)?.q)
    }
}

impl Quantizer for ChannelQuantizer {
    fn method(&self) -> &'static str {
        "channel"
    }
}
