//! Finite-difference verification of the reverse-mode gradients, run in
//! f64 at reduced dimensions for every trainable block.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::FeatureTensor;
use crate::encoder::{relative_positions, ConformerBlock, CrossChannelAttention, EncoderConfig, MultiChannelEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{seeded_rng, ParamBuilder, ParamStore};
use crate::pretrain::contrastive_loss;
use crate::quantizer::{ChannelQuantizer, Quantize, QuantizerConfig, QuantizerDims, QuantizerRegistry};
use crate::tensor::Tensor;
use crate::transducer::{JointConfig, JointNetwork, LabelEncoder};
use crate::nn::Activation;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Names accepted by [`run_suite`].
pub const MODULES: &[&str] = &[
    "conformer",
    "cross-channel",
    "encoder",
    "quantizer-joint",
    "quantizer-feature",
    "quantizer-channel",
    "channel-attention",
    "joint-network",
    "label-encoder",
    "contrastive",
    "rnnt",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub module: String,
    pub max_rel_err: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let v = f(&mut g)?;
    Ok(g.value(v).data()[0])
}

/// Compares backward-pass gradients of the scalar `f` against central
/// differences for up to `per_param` sampled coordinates of every
/// parameter. Returns the largest relative error and the number of
/// coordinates checked.
pub fn finite_diff_check<F>(store: &mut ParamStore<f64>, f: F, per_param: usize, rng: &mut impl Rng) -> Result<(f64, usize)>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let first = evaluate(store, &f)?;
    let second = evaluate(store, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministicFunction { first, second });
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(&*store);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        store
            .iter()
            .map(|(id, _, t)| grads.param(id).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    };
    let ids: Vec<_> = store.ids().collect();
    let mut worst = 0.0f64;
    let mut count = 0;
    for id in ids {
        let len = store.get(id).len();
        let coords = index::sample(rng, len, per_param.min(len));
        for i in coords {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + STEP;
            let plus = evaluate(store, &f)?;
            store.get_mut(id).data_mut()[i] = orig - STEP;
            let minus = evaluate(store, &f)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[id.index()][i], numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        heads: 2,
        head_dim: 2,
        hidden: 4,
        ffn_dim: 6,
        conv_kernel: 3,
        input_dim: 9,
        rel_pos_dim: 4,
        dropout: 0.0,
    }
}

const BINS: usize = 3;
const FRAMES: usize = 5;

fn random_features(channels: usize, rng: &mut ChaCha8Rng) -> FeatureTensor {
    let amp = (0..channels * FRAMES * BINS).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let phase = (0..channels * FRAMES * 2 * BINS).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    FeatureTensor::new(channels, FRAMES, BINS, amp, phase).expect("consistent sizes")
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape.to_vec()).expect("shape")
}

/// `sum(v * w)` for a fixed random `w`, so every output entry matters.
fn readout(g: &mut Graph<'_, f64>, v: Var, seed: u64) -> Result<Var> {
    let w = random_tensor(g.shape(v), &mut seeded_rng(seed));
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn quantizer_cfg(method: &str) -> QuantizerConfig {
    QuantizerConfig {
        method: method.into(),
        amp_activation: Activation::Swish,
        phase_activation: Activation::None,
        target_dim: 4,
        attention_dim: 3,
        share_channel_weights: true,
    }
}

/// Runs one named check.
pub fn check_module(name: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::<f64>::new();
    let mut init = seeded_rng(seed ^ 0x5eed);
    let cfg = tiny_encoder();
    let per_param = 6;
    let (max_rel_err, coordinates) = match name {
        "conformer" => {
            let (block, x) = {
                let mut pb = ParamBuilder::new(&mut store, &mut init);
                let block = ConformerBlock::new(&mut pb, "block", &cfg);
                (block, pb.uniform("x", &[FRAMES, cfg.hidden], 1.0))
            };
            finite_diff_check(
                &mut store,
                |g| {
                    let rel = g.constant(relative_positions(FRAMES, FRAMES, cfg.rel_pos_dim));
                    let x = g.param(x);
                    let y = block.forward(g, x, rel, None)?;
                    readout(g, y, 1)
                },
                per_param,
                &mut rng,
            )?
        }
        "cross-channel" => {
            let (cross, xs) = {
                let mut pb = ParamBuilder::new(&mut store, &mut init);
                let cross = CrossChannelAttention::new(&mut pb, "cross", &cfg);
                let xs: Vec<_> = (0..3).map(|c| pb.uniform(&format!("x{c}"), &[FRAMES, cfg.hidden], 1.0)).collect();
                (cross, xs)
            };
            finite_diff_check(
                &mut store,
                |g| {
                    let rel = g.constant(relative_positions(FRAMES, FRAMES, cfg.rel_pos_dim));
                    let streams: Vec<Var> = xs.iter().map(|&x| g.param(x)).collect();
                    let out = cross.forward(g, &streams, rel)?;
                    let cat = g.concat(&out, crate::graph::Axis::Cols)?;
                    readout(g, cat, 2)
                },
                per_param,
                &mut rng,
            )?
        }
        "encoder" => {
            let enc = MultiChannelEncoder::new(&mut ParamBuilder::new(&mut store, &mut init), &cfg)?;
            let feats = random_features(2, &mut rng);
            finite_diff_check(
                &mut store,
                |g| {
                    let out = enc.encode(g, &feats, Some(&[1, 2]), None)?;
                    readout(g, out.fused, 3)
                },
                per_param,
                &mut rng,
            )?
        }
        "quantizer-joint" | "quantizer-feature" | "quantizer-channel" => {
            let method = name.trim_start_matches("quantizer-");
            let dims = QuantizerDims { channels: 3, bins: BINS };
            let q = QuantizerRegistry::default().build(
                &quantizer_cfg(method),
                dims,
                &mut ParamBuilder::new(&mut store, &mut init),
            )?;
            let feats = random_features(3, &mut rng);
            finite_diff_check(
                &mut store,
                |g| {
                    let v = Quantize::<f64>::quantize(&*q, g, &feats)?;
                    readout(g, v, 4)
                },
                per_param,
                &mut rng,
            )?
        }
        "channel-attention" => {
            let dims = QuantizerDims { channels: 3, bins: BINS };
            let q = ChannelQuantizer::new(
                &mut ParamBuilder::new(&mut store, &mut init),
                &QuantizerConfig {
                    share_channel_weights: false,
                    ..quantizer_cfg("channel")
                },
                dims,
            )?;
            let feats = random_features(3, &mut rng);
            finite_diff_check(
                &mut store,
                |g| {
                    let a = q.channel_attention(g, &feats)?;
                    readout(g, a, 5)
                },
                per_param,
                &mut rng,
            )?
        }
        "joint-network" => {
            let jc = JointConfig {
                vocab: 4,
                label_hidden: 3,
                proj_dim: 5,
                joint_hidden: 4,
            };
            let (joint, f, p) = {
                let mut pb = ParamBuilder::new(&mut store, &mut init);
                let joint = JointNetwork::new(&mut pb, 4, &jc);
                (joint, pb.uniform("f", &[3, 4], 1.0), pb.uniform("p", &[2, 3], 1.0))
            };
            finite_diff_check(
                &mut store,
                |g| {
                    let (f, p) = (g.param(f), g.param(p));
                    let lat = joint.forward(g, f, p)?;
                    readout(g, lat, 6)
                },
                per_param,
                &mut rng,
            )?
        }
        "label-encoder" => {
            let jc = JointConfig {
                vocab: 4,
                label_hidden: 3,
                proj_dim: 5,
                joint_hidden: 4,
            };
            let label = LabelEncoder::new(&mut ParamBuilder::new(&mut store, &mut init), &jc);
            finite_diff_check(
                &mut store,
                |g| {
                    let h = label.encode(g, &[2, 0, 3, 3])?;
                    readout(g, h, 7)
                },
                per_param,
                &mut rng,
            )?
        }
        "contrastive" => {
            let (f, q) = {
                let mut pb = ParamBuilder::new(&mut store, &mut init);
                (pb.uniform("f", &[6, 4], 1.0), pb.uniform("q", &[6, 4], 1.0))
            };
            let distractors: Vec<Vec<usize>> = (0..6).map(|i| (1..4).map(|k| (i + k) % 6).collect()).collect();
            finite_diff_check(
                &mut store,
                |g| {
                    let (f, q) = (g.param(f), g.param(q));
                    contrastive_loss(g, f, q, &distractors)
                },
                24,
                &mut rng,
            )?
        }
        "rnnt" => {
            let (frames, labels, width) = (4usize, vec![1usize, 0, 2], 4usize);
            let logits = ParamBuilder::new(&mut store, &mut init).uniform("logits", &[frames * (labels.len() + 1), width], 2.0);
            finite_diff_check(
                &mut store,
                |g| {
                    let z = g.param(logits);
                    let lat = g.log_softmax(z);
                    g.rnnt_loss(lat, frames, &labels, width - 1)
                },
                64,
                &mut rng,
            )?
        }
        other => {
            return Err(Error::UnknownName {
                kind: "gradcheck module",
                name: other.into(),
                choices: MODULES.join(", "),
            })
        }
    };
    Ok(GradCheckReport {
        module: name.into(),
        max_rel_err,
        coordinates,
    })
}

/// Every module, or just the named one.
pub fn run_suite(only: Option<&str>, seed: u64) -> Result<Vec<GradCheckReport>> {
    match only {
        Some(name) => Ok(vec![check_module(name, seed)?]),
        None => MODULES.iter().map(|m| check_module(m, seed)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        // Detaching inside the function hides a dependency from backward,
        // which the finite differences still see.
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::from_f64(&[0.3, -0.7], &[1, 2]).unwrap());
        let (err, n) = finite_diff_check(
            &mut store,
            |g| {
                let v = g.param(w);
                let d = g.detach(v);
                let sq = g.mul(v, d)?;
                Ok(g.sum(sq))
            },
            2,
            &mut seeded_rng(0),
        )
        .unwrap();
        assert_eq!(n, 2);
        assert!(err > 0.1);
    }

    #[test]
    fn unknown_module() {
        assert!(matches!(check_module("nope", 0), Err(Error::UnknownName { .. })));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-9, 2e-9), 1e-9);
        assert!((relative_error(100.0, 101.0) - 1.0 / 101.0).abs() < 1e-15);
    }
}
