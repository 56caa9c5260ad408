//! Optimization pieces shared by pre-training and fine-tuning: the
//! Transformer learning-rate schedule, global-norm clipping, Adam,
//! SpecAugment and edit-distance metrics.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureTensor;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub model_dim: usize,
    /// Multiplier on the schedule; 1.0 is the plain Transformer schedule.
    pub lr_scale: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 4000,
            model_dim: 256,
            lr_scale: 1.0,
            clip_norm: 5.0,
        }
    }
}

/// `model_dim^-0.5 * min(step^-0.5, step * warmup^-1.5)`
pub fn noam_lr(step: usize, model_dim: usize, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Rescales every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g {
            let v = x.f64();
            if !v.is_finite() {
                return Err(Error::NonFiniteGradient);
            }
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|x| *x *= s);
    }
    Ok(norm)
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub step: usize,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam step with the scheduled learning rate. `grads`
/// is indexed like the store. Returns the learning rate used.
pub fn adam_update<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    cfg: &OptimConfig,
) -> Result<f64> {
    if grads.len() != store.len() {
        return Err(Error::shape("adam_update", &[store.len()], &[grads.len()]));
    }
    state.step += 1;
    let lr = cfg.lr_scale * noam_lr(state.step, cfg.model_dim, cfg.warmup_steps);
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, eps) = (T::one(), T::of(cfg.eps));
    let step_size = T::of(lr / bc1);
    let bc2_sqrt = T::of(bc2.sqrt());
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let p = store.get_mut(id);
        if grads[i].len() != p.len() {
            return Err(Error::shape("adam_update", p.shape(), &[grads[i].len()]));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(lr)
}

/// Mean loss and mean parameter gradients over `n` independent items.
/// `loss_fn` builds item `i`'s scalar loss on a fresh graph. Items run on
/// the rayon pool when `parallel` is set; the reduction always follows item
/// order, so results do not depend on the thread count.
pub fn batch_gradients<T, F>(store: &ParamStore<T>, n: usize, parallel: bool, loss_fn: F) -> Result<(f64, Vec<Vec<T>>)>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>, usize) -> Result<Var> + Sync,
{
    let item = |i: usize| -> Result<(f64, Vec<(usize, Vec<T>)>)> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g, i)?;
        let value = g.value(loss).data()[0].f64();
        let grads = g.backward(loss)?;
        let per_param = grads.params().into_iter().map(|(id, d)| (id.index(), d.to_vec())).collect();
        Ok((value, per_param))
    };
    let results: Vec<_> = if parallel {
        (0..n).into_par_iter().map(item).collect()
    } else {
        (0..n).map(item).collect()
    };
    let mut acc: Vec<Vec<T>> = store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
    let mut total = 0.0;
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        for (i, d) in grads {
            acc[i].iter_mut().zip(&d).for_each(|(a, &x)| *a += x);
        }
    }
    let scale = T::of(1.0 / n.max(1) as f64);
    acc.iter_mut().flatten().for_each(|x| *x *= scale);
    Ok((total / n.max(1) as f64, acc))
}

/// Learning rate and pre-clip gradient norm of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateInfo {
    pub lr: f64,
    pub grad_norm: f64,
}

/// Clip then Adam.
pub fn apply_update<T: Real>(
    store: &mut ParamStore<T>,
    mut grads: Vec<Vec<T>>,
    state: &mut OptimizerState<T>,
    cfg: &OptimConfig,
) -> Result<UpdateInfo> {
    let grad_norm = clip_gradients(&mut grads, cfg.clip_norm)?;
    let lr = adam_update(store, &grads, state, cfg)?;
    Ok(UpdateInfo { lr, grad_norm })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub freq_masks: usize,
    pub max_freq_width: usize,
    pub time_masks: usize,
    pub max_time_width: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            freq_masks: 2,
            max_freq_width: 27,
            time_masks: 2,
            max_time_width: 20,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            freq_masks: 0,
            max_freq_width: 0,
            time_masks: 0,
            max_time_width: 0,
        }
    }
}

/// Frequency and time masks on the amplitude features of every channel at
/// identical positions; masked cells take the utterance's mean amplitude.
/// Phase features are untouched.
pub fn spec_augment(feats: &FeatureTensor, policy: &AugmentPolicy, rng: &mut impl Rng) -> FeatureTensor {
    let mut out = feats.clone();
    let (c_n, t_n, f_n) = (feats.channels, feats.frames, feats.bins);
    if t_n == 0 || f_n == 0 {
        return out;
    }
    let mean = (feats.amplitude.iter().map(|&x| x as f64).sum::<f64>() / feats.amplitude.len() as f64) as f32;
    let mut masked_bins = vec![false; f_n];
    let mut masked_frames = vec![false; t_n];
    for _ in 0..policy.freq_masks {
        let w = rng.gen_range(0..=policy.max_freq_width.min(f_n));
        let f0 = rng.gen_range(0..=f_n - w);
        masked_bins[f0..f0 + w].iter_mut().for_each(|m| *m = true);
    }
    for _ in 0..policy.time_masks {
        let w = rng.gen_range(0..=policy.max_time_width.min(t_n));
        let t0 = rng.gen_range(0..=t_n - w);
        masked_frames[t0..t0 + w].iter_mut().for_each(|m| *m = true);
    }
    for c in 0..c_n {
        for t in 0..t_n {
            let row = &mut out.amplitude[(c * t_n + t) * f_n..(c * t_n + t + 1) * f_n];
            for (k, x) in row.iter_mut().enumerate() {
                if masked_frames[t] || masked_bins[k] {
                    *x = mean;
                }
            }
        }
    }
    out
}

pub fn levenshtein<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein(ref, hyp) / len(ref)`
pub fn edit_distance_rate<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    edit_distance_rate(&r, &h)
}

pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    edit_distance_rate(&r, &h)
}

/// Relative error-rate reduction `(base - new) / base`, in percent.
/// A zero baseline yields zero unless the new rate is worse.
pub fn relative_reduction(base: f64, new: f64) -> f64 {
    if base == 0.0 {
        if new == 0.0 {
            0.0
        } else {
            -100.0
        }
    } else {
        100.0 * (base - new) / base
    }
}
