//! Multi-channel conformer encoder: shared channel-wise conformer blocks,
//! each followed by a cross-channel attention layer, and average fusion.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureTensor, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::graph::{Axis, Graph, Var};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub input_dim: usize,
    /// Width of the sinusoidal relative-position code feeding the
    /// per-head attention bias.
    pub rel_pos_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            heads: 8,
            head_dim: 32,
            hidden: 256,
            ffn_dim: 512,
            conv_kernel: 7,
            input_dim: FEATURE_DIM,
            rel_pos_dim: 16,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    /// Reduced dimensions for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 4,
            head_dim: 8,
            hidden: 32,
            ffn_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads * self.head_dim != self.hidden {
            return Err(Error::Config(format!(
                "heads ({}) x head_dim ({}) must equal hidden ({})",
                self.heads, self.head_dim, self.hidden
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if !self.rel_pos_dim.is_multiple_of(2) {
            return Err(Error::Config("rel_pos_dim must be even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Sinusoidal code of every query/key offset, `[tq * tk, dim]`.
pub fn relative_positions<T: Real>(tq: usize, tk: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(tq * tk * dim);
    for i in 0..tq {
        for j in 0..tk {
            let d = i as f64 - j as f64;
            for p in 0..dim / 2 {
                let freq = 1.0 / 10_000f64.powf(2.0 * p as f64 / dim as f64);
                data.push(T::of((d * freq).sin()));
                data.push(T::of((d * freq).cos()));
            }
        }
    }
    Tensor::new(data, vec![tq * tk, dim]).expect("relative position shape")
}

/// Multi-head attention with a learned bias over relative offsets.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    rel: ParamId,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &EncoderConfig) -> Self {
        let mut sub = pb.sub(name);
        let h = cfg.hidden;
        Self {
            q: Linear::new(&mut sub, "q", h, h, true),
            k: Linear::new(&mut sub, "k", h, h, true),
            v: Linear::new(&mut sub, "v", h, h, true),
            out: Linear::new(&mut sub, "out", h, h, true),
            rel: sub.uniform("rel", &[cfg.rel_pos_dim, cfg.heads], 0.1),
            heads: cfg.heads,
            head_dim: cfg.head_dim,
        }
    }

    /// `query: [Tq, H]`, `kv: [Tk, H]`, `rel_code` from
    /// [`relative_positions`] for `(Tq, Tk)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, query: Var, kv: Var, rel_code: Var) -> Result<Var> {
        let (tq, _) = g.dims(query);
        let (tk, _) = g.dims(kv);
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, kv)?;
        let v = self.v.forward(g, kv)?;
        let rel_w = g.param(self.rel);
        let bias_all = g.matmul(rel_code, rel_w)?;
        let scale = T::of(1.0 / (self.head_dim as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = g.slice(q, Axis::Cols, start, self.head_dim)?;
            let kh = g.slice(k, Axis::Cols, start, self.head_dim)?;
            let vh = g.slice(v, Axis::Cols, start, self.head_dim)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let bias = g.slice(bias_all, Axis::Cols, h, 1)?;
            let bias = g.reshape(bias, &[tq, tk])?;
            let scores = g.add(scores, bias)?;
            let attn = g.softmax(scores);
            heads.push(g.matmul(attn, vh)?);
        }
        let joined = g.concat(&heads, Axis::Cols)?;
        self.out.forward(g, joined)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &EncoderConfig) -> Self {
        let mut sub = pb.sub(name);
        Self {
            norm: LayerNorm::new(&mut sub, "norm", cfg.hidden),
            up: Linear::new(&mut sub, "up", cfg.hidden, cfg.ffn_dim, true),
            down: Linear::new(&mut sub, "down", cfg.ffn_dim, cfg.hidden, true),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.norm.forward(g, x)?;
        let y = self.up.forward(g, y)?;
        let y = g.swish(y);
        self.down.forward(g, y)
    }
}

#[derive(Clone, Debug)]
struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise: ParamId,
    depthwise_bias: ParamId,
    mid_norm: LayerNorm,
    pointwise_out: Linear,
}

impl ConvModule {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &EncoderConfig) -> Self {
        let mut sub = pb.sub(name);
        let h = cfg.hidden;
        let limit = (3.0 / cfg.conv_kernel as f64).sqrt();
        Self {
            norm: LayerNorm::new(&mut sub, "norm", h),
            pointwise_in: Linear::new(&mut sub, "pointwise_in", h, 2 * h, true),
            depthwise: sub.uniform("depthwise", &[cfg.conv_kernel, h], limit),
            depthwise_bias: sub.zeros("depthwise_bias", &[h]),
            mid_norm: LayerNorm::new(&mut sub, "mid_norm", h),
            pointwise_out: Linear::new(&mut sub, "pointwise_out", h, h, true),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.norm.forward(g, x)?;
        let y = self.pointwise_in.forward(g, y)?;
        let y = g.glu(y)?;
        let w = g.param(self.depthwise);
        let y = g.depthwise_conv(y, w)?;
        let b = g.param(self.depthwise_bias);
        let y = g.add_row(y, b)?;
        let y = self.mid_norm.forward(g, y)?;
        let y = g.swish(y);
        self.pointwise_out.forward(g, y)
    }
}

/// One macaron-style conformer block applied to a single channel's stream.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    ffn1: FeedForward,
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    conv: ConvModule,
    ffn2: FeedForward,
    final_norm: LayerNorm,
    dropout: f64,
}

impl ConformerBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &EncoderConfig) -> Self {
        let mut sub = pb.sub(name);
        Self {
            ffn1: FeedForward::new(&mut sub, "ffn1", cfg),
            attn_norm: LayerNorm::new(&mut sub, "attn_norm", cfg.hidden),
            attn: MultiHeadAttention::new(&mut sub, "attn", cfg),
            conv: ConvModule::new(&mut sub, "conv", cfg),
            ffn2: FeedForward::new(&mut sub, "ffn2", cfg),
            final_norm: LayerNorm::new(&mut sub, "final_norm", cfg.hidden),
            dropout: cfg.dropout,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        rel_code: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let half = T::of(0.5);
        let mut drop = |g: &mut Graph<'_, T>, v: Var| match rng.as_deref_mut() {
            Some(r) => g.dropout(v, self.dropout, r),
            None => v,
        };
        let y = self.ffn1.forward(g, x)?;
        let y = drop(g, y);
        let y = g.scale(y, half);
        let x = g.add(x, y)?;
        let n = self.attn_norm.forward(g, x)?;
        let y = self.attn.forward(g, n, n, rel_code)?;
        let y = drop(g, y);
        let x = g.add(x, y)?;
        let y = self.conv.forward(g, x)?;
        let y = drop(g, y);
        let x = g.add(x, y)?;
        let y = self.ffn2.forward(g, x)?;
        let y = drop(g, y);
        let y = g.scale(y, half);
        let x = g.add(x, y)?;
        self.final_norm.forward(g, x)
    }
}

/// Each channel queries the mean of the other channels' streams.
#[derive(Clone, Debug)]
pub struct CrossChannelAttention {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

impl CrossChannelAttention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &EncoderConfig) -> Self {
        let mut sub = pb.sub(name);
        Self {
            norm: LayerNorm::new(&mut sub, "norm", cfg.hidden),
            attn: MultiHeadAttention::new(&mut sub, "attn", cfg),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, streams: &[Var], rel_code: Var) -> Result<Vec<Var>> {
        let c = streams.len();
        if c < 2 {
            return Err(Error::SingleChannel(c));
        }
        let normed = streams
            .iter()
            .map(|&s| self.norm.forward(g, s))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(c);
        for i in 0..c {
            let others = mean_of_others(g, &normed, i)?;
            let y = self.attn.forward(g, normed[i], others, rel_code)?;
            out.push(g.add(streams[i], y)?);
        }
        Ok(out)
    }
}

/// Mean over every stream except `skip`; with two streams this is exactly
/// the other stream.
pub fn mean_of_others<T: Real>(g: &mut Graph<'_, T>, streams: &[Var], skip: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (j, &s) in streams.iter().enumerate() {
        if j == skip {
            continue;
        }
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    let acc = acc.ok_or(Error::SingleChannel(streams.len()))?;
    let n = streams.len() - 1;
    Ok(if n > 1 {
        g.scale(acc, T::of(1.0 / n as f64))
    } else {
        acc
    })
}

pub struct EncoderOutput {
    /// `[T, H]`, mean of the channel streams.
    pub fused: Var,
    /// One `[T, H]` stream per channel.
    pub per_channel: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MultiChannelEncoder {
    cfg: EncoderConfig,
    input: Linear,
    mask_embedding: ParamId,
    blocks: Vec<(ConformerBlock, CrossChannelAttention)>,
}

impl MultiChannelEncoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut sub = pb.sub("encoder");
        let input = Linear::new(&mut sub, "input", cfg.input_dim, cfg.hidden, true);
        let mask_embedding = sub.uniform("mask_embedding", &[cfg.hidden], 1.0);
        let blocks = (0..cfg.layers)
            .map(|l| {
                (
                    ConformerBlock::new(&mut sub, &format!("block{l}"), cfg),
                    CrossChannelAttention::new(&mut sub, &format!("cross{l}"), cfg),
                )
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            input,
            mask_embedding,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Per-channel projection to the hidden width; masked frames of every
    /// channel are replaced by the shared mask embedding.
    pub fn input_proj<T: Real>(&self, g: &mut Graph<'_, T>, feats: &FeatureTensor, mask: Option<&[usize]>) -> Result<Vec<Var>> {
        if feats.dim() != self.cfg.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.input_dim,
                got: feats.dim(),
            });
        }
        let mut out = Vec::with_capacity(feats.channels);
        for c in 0..feats.channels {
            let x = feature_matrix::<T>(feats, c);
            let x = g.constant(x);
            let mut h = self.input.forward(g, x)?;
            if let Some(rows) = mask.filter(|m| !m.is_empty()) {
                let emb = g.param(self.mask_embedding);
                h = g.replace_rows(h, emb, rows)?;
            }
            out.push(h);
        }
        Ok(out)
    }

    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        feats: &FeatureTensor,
        mask: Option<&[usize]>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        if feats.channels < 2 {
            return Err(Error::SingleChannel(feats.channels));
        }
        let mut streams = self.input_proj(g, feats, mask)?;
        let t = feats.frames;
        let rel_code = g.constant(relative_positions(t, t, self.cfg.rel_pos_dim));
        for (block, cross) in &self.blocks {
            streams = streams
                .iter()
                .map(|&s| block.forward(g, s, rel_code, rng.as_deref_mut()))
                .collect::<Result<Vec<_>>>()?;
            streams = cross.forward(g, &streams, rel_code)?;
        }
        let fused = channel_mean(g, &streams)?;
        Ok(EncoderOutput {
            fused,
            per_channel: streams,
        })
    }
}

pub fn channel_mean<T: Real>(g: &mut Graph<'_, T>, streams: &[Var]) -> Result<Var> {
    let mut acc = streams[0];
    for &s in &streams[1..] {
        acc = g.add(acc, s)?;
    }
    Ok(g.scale(acc, T::of(1.0 / streams.len() as f64)))
}

/// `[X_c^amplitude ; X_c^phase]` rows of channel `c` as a `[T, 3F]` tensor.
pub fn feature_matrix<T: Real>(feats: &FeatureTensor, c: usize) -> Tensor<T> {
    let data = feats.channel_matrix(c).into_iter().map(|x| T::of(x as f64)).collect();
    Tensor::new(data, vec![feats.frames, feats.dim()]).expect("feature matrix shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, ParamStore};
    use rand::Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            heads: 2,
            head_dim: 4,
            hidden: 8,
            ffn_dim: 12,
            conv_kernel: 3,
            input_dim: 6,
            rel_pos_dim: 4,
            dropout: 0.0,
        }
    }

    fn random_feats(c: usize, t: usize, seed: u64) -> FeatureTensor {
        let mut rng = seeded_rng(seed);
        let amp = (0..c * t * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ph = (0..c * t * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureTensor::new(c, t, 2, amp, ph).unwrap()
    }

    fn build(cfg: &EncoderConfig) -> (ParamStore<f64>, MultiChannelEncoder) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(3);
        let enc = MultiChannelEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg).unwrap();
        (store, enc)
    }

    #[test]
    fn default_config_matches_table() {
        let c = EncoderConfig::default();
        assert_eq!((c.layers, c.heads, c.head_dim, c.hidden, c.ffn_dim, c.conv_kernel), (8, 8, 32, 256, 512, 7));
        c.validate().unwrap();
        EncoderConfig::desk().validate().unwrap();
        let bad = EncoderConfig { heads: 3, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn input_projection_masking() {
        let cfg = tiny();
        let (store, enc) = build(&cfg);
        let feats = random_feats(2, 10, 1);
        let mut g = Graph::new(&store);
        let out = enc.input_proj(&mut g, &feats, None).unwrap();
        assert_eq!(g.shape(out[0]), &[10, 8]);
        let plain: Vec<Vec<f64>> = out.iter().map(|&v| g.value(v).data().to_vec()).collect();
        let empty = enc.input_proj(&mut g, &feats, Some(&[])).unwrap();
        for (a, b) in plain.iter().zip(&empty) {
            assert_eq!(a.as_slice(), g.value(*b).data());
        }
        let masked = enc.input_proj(&mut g, &feats, Some(&[2, 3])).unwrap();
        let emb = store.get(enc.mask_embedding).data();
        for &v in &masked {
            let m = g.value(v);
            assert_eq!(m.row(2), emb);
            assert_eq!(m.row(3), emb);
            assert_ne!(m.row(4), emb);
        }
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let (store, enc) = build(&tiny());
        let feats = FeatureTensor::new(2, 3, 3, vec![0.0; 18], vec![0.0; 36]).unwrap();
        let mut g = Graph::new(&store);
        assert!(matches!(
            enc.input_proj(&mut g, &feats, None),
            Err(Error::DimensionMismatch { expected: 6, got: 9 })
        ));
    }

    #[test]
    fn block_preserves_shape_and_shares_weights() {
        let cfg = tiny();
        let (store, enc) = build(&cfg);
        let feats = random_feats(2, 7, 2);
        let same = FeatureTensor::new(
            2,
            7,
            2,
            [&feats.amplitude[..14], &feats.amplitude[..14]].concat(),
            [&feats.phase[..28], &feats.phase[..28]].concat(),
        )
        .unwrap();
        let mut g = Graph::new(&store);
        let streams = enc.input_proj(&mut g, &same, None).unwrap();
        let rel = g.constant(relative_positions(7, 7, cfg.rel_pos_dim));
        let (block, cross) = &enc.blocks[0];
        let a = block.forward(&mut g, streams[0], rel, None).unwrap();
        let b = block.forward(&mut g, streams[1], rel, None).unwrap();
        assert_eq!(g.shape(a), &[7, 8]);
        assert_eq!(g.value(a), g.value(b));
        let crossed = cross.forward(&mut g, &[a, b], rel).unwrap();
        assert_eq!(g.value(crossed[0]), g.value(crossed[1]));
        assert!(matches!(cross.forward(&mut g, &[a], rel), Err(Error::SingleChannel(1))));
    }

    #[test]
    fn mean_of_others_with_two_channels_is_the_other() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::from_f64(&[1.0, 2.0], &[1, 2]).unwrap());
        let b = g.constant(Tensor::from_f64(&[3.0, 5.0], &[1, 2]).unwrap());
        let m = mean_of_others(&mut g, &[a, b], 0).unwrap();
        assert_eq!(m, b);
        let c = g.constant(Tensor::from_f64(&[7.0, 9.0], &[1, 2]).unwrap());
        let m = mean_of_others(&mut g, &[a, b, c], 0).unwrap();
        assert_eq!(g.value(m).data(), &[5.0, 7.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let cfg = tiny();
        let (store, enc) = build(&cfg);
        let feats = random_feats(2, 6, 4);
        let mut g = Graph::new(&store);
        let out = enc.encode(&mut g, &feats, None, None).unwrap();
        let x = out.per_channel[0];
        let n = g.layer_norm(x, 1e-12);
        for r in 0..6 {
            let row = g.value(n).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-3 && (var - 1.0).abs() < 1e-3);
        }
        assert!(g.value(out.fused).is_finite());
    }

    #[test]
    fn encode_is_deterministic_and_permutation_invariant() {
        let cfg = EncoderConfig { layers: 2, ..tiny() };
        let (store, enc) = build(&cfg);
        let feats = random_feats(3, 5, 9);
        let run = |f: &FeatureTensor| {
            let mut g = Graph::new(&store);
            let out = enc.encode(&mut g, f, None, None).unwrap();
            g.value(out.fused).clone()
        };
        let a = run(&feats);
        assert_eq!(a, run(&feats));
        let p = run(&feats.permute_channels(&[2, 0, 1]).unwrap());
        for (x, y) in a.data().iter().zip(p.data()) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }
}
