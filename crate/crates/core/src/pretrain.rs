//! Masked contrastive pre-training of the multi-channel encoder against
//! quantizer targets computed from the clean features.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureTensor;
use crate::encoder::{EncoderConfig, MultiChannelEncoder};
use crate::error::{Error, Result};
use crate::graph::{Axis, Graph, Var};
use crate::params::{seeded_rng, ParamBuilder, ParamStore};
use crate::quantizer::{Quantize, Quantizer, QuantizerConfig, QuantizerDims, QuantizerRegistry};
use crate::tensor::Real;
use crate::train::{apply_update, batch_gradients, OptimConfig, OptimizerState, UpdateInfo};

pub const COSINE_EPS: f64 = 1e-8;

/// Sorted set of masked frame indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub frames: usize,
    pub masked: Vec<usize>,
    pub span_length: usize,
}

impl MaskSpec {
    pub fn coverage(&self) -> f64 {
        self.masked.len() as f64 / self.frames.max(1) as f64
    }
}

/// Uniform span starts, each marking `span_length` frames (clipped at the
/// end), until at least `ratio * frames` frames are covered.
pub fn sample_mask_with(frames: usize, span_length: usize, ratio: f64, rng: &mut impl Rng) -> MaskSpec {
    let span = span_length.max(1);
    let need = ((ratio * frames as f64).ceil() as usize).clamp(1, frames.max(1));
    let mut hit = vec![false; frames];
    let mut count = 0;
    while frames > 0 && count < need {
        let start = rng.gen_range(0..frames);
        for m in hit.iter_mut().skip(start).take(span) {
            if !*m {
                *m = true;
                count += 1;
            }
        }
    }
    MaskSpec {
        frames,
        masked: (0..frames).filter(|&t| hit[t]).collect(),
        span_length: span,
    }
}

/// Spans of 10 frames over half of the sequence.
pub fn sample_mask(frames: usize, seed: u64) -> MaskSpec {
    sample_mask_with(frames, 10, 0.5, &mut seeded_rng(seed))
}

/// For each masked frame, `k` other masked frames drawn without
/// replacement; `k` is clamped to `|masked| - 1`. Entries are frame indices.
pub fn sample_distractors(mask: &MaskSpec, k: usize, seed: u64) -> Vec<Vec<usize>> {
    distractors_with(mask, k, &mut seeded_rng(seed))
}

pub fn distractors_with(mask: &MaskSpec, k: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let m = mask.masked.len();
    let k = k.min(m.saturating_sub(1));
    (0..m)
        .map(|i| {
            // Draw from the m-1 other positions, skipping over position i.
            index::sample(rng, m - 1, k)
                .into_iter()
                .map(|j| mask.masked[if j >= i { j + 1 } else { j }])
                .collect()
        })
        .collect()
}

/// Converts frame-index distractors to positions within `mask.masked`.
pub fn distractor_positions(mask: &MaskSpec, distractors: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    distractors
        .iter()
        .map(|row| {
            row.iter()
                .map(|t| {
                    mask.masked.binary_search(t).map_err(|_| Error::Config(format!("distractor frame {t} is not masked")))
                })
                .collect()
        })
        .collect()
}

/// Mean over rows of `-log softmax(sim(f_i, [q_i, q_d...]))[0]` with cosine
/// similarity and no temperature. `f`, `q`: `[M, d]`; `distractors[i]` holds
/// row positions into `q`, the same count for every row.
pub fn contrastive_loss<T: Real>(g: &mut Graph<'_, T>, f: Var, q: Var, distractors: &[Vec<usize>]) -> Result<Var> {
    let (m, d) = g.dims(f);
    if m == 0 {
        return Err(Error::EmptyMask);
    }
    if g.dims(q) != (m, d) {
        return Err(Error::shape("contrastive_loss", g.shape(f), g.shape(q)));
    }
    if distractors.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: distractors.len(),
        });
    }
    let k = distractors[0].len();
    let mut idx = Vec::with_capacity(m * (k + 1));
    for (i, row) in distractors.iter().enumerate() {
        if row.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: row.len() });
        }
        idx.push(i);
        idx.extend_from_slice(row);
    }
    let eps = T::of(COSINE_EPS);
    let fu = g.l2_normalize_rows(f, eps);
    let qu = g.l2_normalize_rows(q, eps);
    let sims = g.matmul_nt(fu, qu)?;
    let cand = g.gather(sims, &idx, k + 1)?;
    let logp = g.log_softmax(cand);
    let target = g.slice(logp, Axis::Cols, 0, 1)?;
    let mean = g.mean_all(target);
    Ok(g.scale(mean, T::of(-1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub span_length: usize,
    pub mask_ratio: f64,
    pub distractors: usize,
    /// Targets enter the loss as constants.
    pub stop_gradient: bool,
    /// Utterances per optimizer step.
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            span_length: 10,
            mask_ratio: 0.5,
            distractors: 100,
            stop_gradient: true,
            batch_size: 4,
        }
    }
}

/// Encoder plus quantizer. Parameters live in a caller-owned store.
#[derive(Debug)]
pub struct PretrainModel {
    pub encoder: MultiChannelEncoder,
    pub quantizer: Box<dyn Quantizer>,
    pub cfg: PretrainConfig,
}

impl PretrainModel {
    pub fn new(
        store: &mut ParamStore<f64>,
        seed: u64,
        enc: &EncoderConfig,
        qcfg: &QuantizerConfig,
        dims: QuantizerDims,
        cfg: &PretrainConfig,
        registry: &QuantizerRegistry,
    ) -> Result<Self> {
        if qcfg.target_dim != enc.hidden {
            return Err(Error::Config(format!(
                "quantizer target_dim {} must equal encoder hidden {}",
                qcfg.target_dim, enc.hidden
            )));
        }
        if enc.input_dim != 3 * dims.bins {
            return Err(Error::DimensionMismatch {
                expected: 3 * dims.bins,
                got: enc.input_dim,
            });
        }
        let mut rng = seeded_rng(seed);
        let mut pb = ParamBuilder::new(store, &mut rng);
        let encoder = MultiChannelEncoder::new(&mut pb, enc)?;
        let quantizer = registry.build(qcfg, dims, &mut pb)?;
        Ok(Self {
            encoder,
            quantizer,
            cfg: cfg.clone(),
        })
    }

    /// Samples the mask and distractors of one utterance.
    pub fn sample(&self, frames: usize, seed: u64) -> (MaskSpec, Vec<Vec<usize>>) {
        let mut rng = seeded_rng(seed);
        let mask = sample_mask_with(frames, self.cfg.span_length, self.cfg.mask_ratio, &mut rng);
        let d = distractors_with(&mask, self.cfg.distractors, &mut rng);
        (mask, d)
    }

    /// Contrastive loss of one utterance under a given mask.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        feats: &FeatureTensor,
        mask: &MaskSpec,
        distractors: &[Vec<usize>],
    ) -> Result<Var>
    where
        dyn Quantizer: Quantize<T>,
    {
        let out = self.encoder.encode(g, feats, Some(&mask.masked), None)?;
        let f = g.embedding(out.fused, &mask.masked)?;
        let mut q = Quantize::<T>::quantize(&*self.quantizer, g, feats)?;
        if self.cfg.stop_gradient {
            q = g.detach(q);
        }
        let q = g.embedding(q, &mask.masked)?;
        let pos = distractor_positions(mask, distractors)?;
        contrastive_loss(g, f, q, &pos)
    }
}

/// Deterministic per-(seed, step, item) stream seed.
pub fn derive_seed(seed: u64, step: u64, item: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(item.wrapping_mul(0x94D0_49BB_1331_11EB));
    z ^= z >> 31;
    z = z.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z ^ (z >> 32)
}

/// One pre-training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Masks each utterance of the batch, averages the contrastive loss and its
/// gradients, clips, and takes one Adam step.
pub fn pretrain_step(
    model: &PretrainModel,
    store: &mut ParamStore<f32>,
    state: &mut OptimizerState<f32>,
    optim: &OptimConfig,
    batch: &[&FeatureTensor],
    seed: u64,
    parallel: bool,
) -> Result<(f64, UpdateInfo)> {
    let step = state.step as u64;
    let (loss, grads) = batch_gradients(store, batch.len(), parallel, |g, i| {
        let feats = batch[i];
        let (mask, d) = model.sample(feats.frames, derive_seed(seed, step, i as u64));
        model.loss(g, feats, &mask, &d)
    })?;
    let info = apply_update(store, grads, state, optim)?;
    Ok((loss, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn mask_coverage_and_determinism() {
        for seed in 0..50 {
            let m = sample_mask(100, seed);
            assert!((50..=59).contains(&m.masked.len()), "{}", m.masked.len());
            assert!(m.masked.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(m, sample_mask(100, seed));
        }
        assert_eq!(sample_mask(1, 3).masked, vec![0]);
    }

    #[test]
    fn distractors_exclude_self_and_clamp() {
        let mask = MaskSpec {
            frames: 200,
            masked: (0..101).map(|i| i * 2).collect(),
            span_length: 10,
        };
        let d = sample_distractors(&mask, 100, 7);
        for (i, row) in d.iter().enumerate() {
            let mut s = row.clone();
            s.sort_unstable();
            let expect: Vec<usize> = mask.masked.iter().copied().filter(|&t| t != mask.masked[i]).collect();
            assert_eq!(s, expect);
        }
        let one = MaskSpec {
            frames: 5,
            masked: vec![3],
            span_length: 10,
        };
        assert_eq!(sample_distractors(&one, 100, 0), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn single_candidate_loss_is_zero() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let f = g.input(Tensor::from_f64(&[1.0, 2.0], &[1, 2]).unwrap());
        let q = g.input(Tensor::from_f64(&[-3.0, 0.5], &[1, 2]).unwrap());
        let loss = contrastive_loss(&mut g, f, q, &[vec![]]).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let f = g.input(Tensor::zeros(&[0, 2]));
        assert!(matches!(contrastive_loss(&mut g, f, f, &[]), Err(Error::EmptyMask)));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(4, 5, 6), derive_seed(4, 5, 6));
    }
}
