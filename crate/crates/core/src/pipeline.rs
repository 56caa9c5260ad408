//! End-to-end phases: feature loading, pre-training, fine-tuning,
//! evaluation and hidden-state dumps.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asr::{finetune_step, AsrModel};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{text_to_tokens, tokens_to_text, Manifest};
use crate::dsp::{extract_features, read_wav, FeatureStats, FeatureTensor, MultiChannelWave};
use crate::encoder::MultiChannelEncoder;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{seeded_rng, ParamBuilder, ParamStore};
use crate::pretrain::{pretrain_step, PretrainModel, StepLog};
use crate::quantizer::{QuantizerDims, QuantizerRegistry};
use crate::train::{cer, levenshtein, relative_reduction, OptimizerState};

/// One transcribed utterance with raw (unnormalized) features.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub tokens: Vec<usize>,
    pub feats: FeatureTensor,
}

pub fn load_utterances(manifest: &Manifest, vocab: usize) -> Result<Vec<Utterance>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let wave = read_wav(&manifest.wav_path(e))?;
            Ok(Utterance {
                id: e.id.clone(),
                text: e.text.clone(),
                tokens: text_to_tokens(&e.text, vocab)?,
                feats: extract_features(&wave)?,
            })
        })
        .collect()
}

/// Cycles through shuffled epochs of item indices.
struct BatchOrder {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng: seeded_rng(seed),
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size.min(self.n))
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn periodic_save(ck: impl FnOnce() -> Checkpoint, every: usize, step: usize, out: Option<&Path>) -> Result<()> {
    if let Some(out) = out {
        if every > 0 && step.is_multiple_of(every) {
            let mut name = out.as_os_str().to_owned();
            name.push(format!(".step{step}"));
            ck().save(Path::new(&name))?;
        }
    }
    Ok(())
}

fn check_nonempty(utts: &[Utterance]) -> Result<()> {
    if utts.is_empty() {
        return Err(Error::Config("no utterances to train on".into()));
    }
    Ok(())
}

/// Contrastive pre-training for `steps` updates. Calls `log` after every
/// step; with `ckpt_out` set, intermediate checkpoints are written every
/// `cfg.checkpoint_every` steps next to it.
pub fn run_pretrain(
    cfg: &RunConfig,
    utts: &[Utterance],
    steps: usize,
    ckpt_out: Option<&Path>,
    log: &mut dyn FnMut(&StepLog),
) -> Result<Checkpoint> {
    cfg.validate()?;
    check_nonempty(utts)?;
    let stats = FeatureStats::estimate(utts.iter().map(|u| &u.feats));
    let feats: Vec<FeatureTensor> = utts.iter().map(|u| stats.normalize(&u.feats)).collect();
    let dims = QuantizerDims {
        channels: feats[0].channels,
        bins: feats[0].bins,
    };
    let mut init = ParamStore::new();
    let model = PretrainModel::new(
        &mut init,
        cfg.seed,
        &cfg.encoder,
        &cfg.quantizer,
        dims,
        &cfg.pretrain,
        &QuantizerRegistry::default(),
    )?;
    let mut store = init.cast::<f32>();
    let mut state = OptimizerState::new(&store);
    let mut order = BatchOrder::new(feats.len(), cfg.seed);
    let started = Instant::now();
    for step in 1..=steps {
        let batch: Vec<&FeatureTensor> = order.next(cfg.pretrain.batch_size).into_iter().map(|i| &feats[i]).collect();
        let (loss, info) = pretrain_step(&model, &mut store, &mut state, &cfg.optim, &batch, cfg.seed, cfg.jobs > 1)?;
        log(&StepLog {
            step,
            loss,
            lr: info.lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        periodic_save(
            || Checkpoint::new("pretrain", step, store.clone(), stats.clone(), cfg),
            cfg.checkpoint_every,
            step,
            ckpt_out,
        )?;
    }
    Ok(Checkpoint::new("pretrain", steps, store, stats, cfg))
}

/// Mean contrastive loss of a fresh model on the first utterances, under
/// one mask draw each.
pub fn initial_contrastive_loss(cfg: &RunConfig, utts: &[Utterance]) -> Result<f64> {
    check_nonempty(utts)?;
    let stats = FeatureStats::estimate(utts.iter().map(|u| &u.feats));
    let dims = QuantizerDims {
        channels: utts[0].feats.channels,
        bins: utts[0].feats.bins,
    };
    let mut init = ParamStore::new();
    let model = PretrainModel::new(
        &mut init,
        cfg.seed,
        &cfg.encoder,
        &cfg.quantizer,
        dims,
        &cfg.pretrain,
        &QuantizerRegistry::default(),
    )?;
    let store = init.cast::<f32>();
    let mut total = 0.0;
    for (i, u) in utts.iter().enumerate() {
        let f = stats.normalize(&u.feats);
        let (mask, d) = model.sample(f.frames, crate::pretrain::derive_seed(cfg.seed, 0, i as u64));
        let mut g = Graph::new(&store);
        let loss = model.loss(&mut g, &f, &mask, &d)?;
        total += g.value(loss).data()[0] as f64;
    }
    Ok(total / utts.len() as f64)
}

/// Transducer fine-tuning. `init` supplies encoder weights and feature
/// statistics; without it the encoder starts from random weights.
pub fn run_finetune(
    cfg: &RunConfig,
    utts: &[Utterance],
    init: Option<&Checkpoint>,
    steps: usize,
    ckpt_out: Option<&Path>,
    log: &mut dyn FnMut(&StepLog),
) -> Result<Checkpoint> {
    cfg.validate()?;
    check_nonempty(utts)?;
    let stats = match init {
        Some(ck) => ck.meta.norm.clone(),
        None => FeatureStats::estimate(utts.iter().map(|u| &u.feats)),
    };
    let feats: Vec<FeatureTensor> = utts.iter().map(|u| stats.normalize(&u.feats)).collect();
    let mut fresh = ParamStore::<f64>::new();
    let model = AsrModel::new(&mut fresh, cfg.seed, &cfg.encoder, &cfg.joint)?;
    let mut store = fresh.cast::<f32>();
    if let Some(ck) = init {
        let copied = store.copy_prefix_from(&ck.store, "encoder.")?;
        if copied == 0 {
            return Err(Error::Config("initial checkpoint holds no encoder parameters".into()));
        }
    }
    let mut state = OptimizerState::new(&store);
    let augment = cfg.finetune.spec_augment.then_some(&cfg.augment);
    let mut order = BatchOrder::new(feats.len(), cfg.seed);
    let started = Instant::now();
    for step in 1..=steps {
        let idx = order.next(cfg.finetune.batch_size);
        let batch: Vec<(&FeatureTensor, &[usize])> = idx.iter().map(|&i| (&feats[i], utts[i].tokens.as_slice())).collect();
        let (loss, info) = finetune_step(&model, &mut store, &mut state, &cfg.optim, augment, &batch, cfg.seed, cfg.jobs > 1)?;
        log(&StepLog {
            step,
            loss,
            lr: info.lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        periodic_save(
            || Checkpoint::new("finetune", step, store.clone(), stats.clone(), cfg),
            cfg.checkpoint_every,
            step,
            ckpt_out,
        )?;
    }
    Ok(Checkpoint::new("finetune", steps, store, stats, cfg))
}

/// Rebuilds the recognizer stored in a fine-tuned checkpoint.
pub fn load_asr(ck: &Checkpoint) -> Result<AsrModel> {
    if ck.meta.phase != "finetune" {
        return Err(Error::Config(format!(
            "checkpoint from phase {:?} has no transducer head",
            ck.meta.phase
        )));
    }
    let cfg = &ck.meta.config;
    let mut shell = ParamStore::<f32>::new();
    let model = AsrModel::new(&mut shell, cfg.seed, &cfg.encoder, &cfg.joint)?;
    ck.restore_into(&mut shell)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
}

/// Greedy transcripts for every utterance.
pub fn transcribe(ck: &Checkpoint, utts: &[Utterance]) -> Result<Vec<Hypothesis>> {
    let model = load_asr(ck)?;
    utts.par_iter()
        .map(|u| {
            let f = ck.meta.norm.normalize(&u.feats);
            let mut g = Graph::new(&ck.store);
            let tokens = model.decode(&mut g, &f)?;
            Ok(Hypothesis {
                id: u.id.clone(),
                reference: u.text.clone(),
                hypothesis: tokens_to_text(&tokens),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub cer: f64,
    pub wer: f64,
}

/// Corpus-level rates: total edits over total reference length.
pub fn error_rates(hyps: &[Hypothesis]) -> Result<ErrorRates> {
    let (mut ce, mut cn, mut we, mut wn) = (0, 0, 0, 0);
    for h in hyps {
        let (r, p): (Vec<char>, Vec<char>) = (h.reference.chars().collect(), h.hypothesis.chars().collect());
        ce += levenshtein(&r, &p);
        cn += r.len();
        let (r, p): (Vec<&str>, Vec<&str>) = (h.reference.split_whitespace().collect(), h.hypothesis.split_whitespace().collect());
        we += levenshtein(&r, &p);
        wn += r.len();
    }
    if cn == 0 || wn == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(ErrorRates {
        cer: ce as f64 / cn as f64,
        wer: we as f64 / wn as f64,
    })
}

/// The `evaluate` report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub n_utts: usize,
    pub cer: f64,
    pub wer: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_cer: Option<f64>,
    /// Percent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cerr_vs_baseline: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub werr_vs_baseline: Option<f64>,
}

pub fn evaluate(
    name: &str,
    ck: &Checkpoint,
    baseline: Option<(&str, &Checkpoint)>,
    utts: &[Utterance],
) -> Result<EvalReport> {
    let rates = error_rates(&transcribe(ck, utts)?)?;
    let mut report = EvalReport {
        checkpoint: name.into(),
        n_utts: utts.len(),
        cer: rates.cer,
        wer: rates.wer,
        baseline: None,
        baseline_cer: None,
        cerr_vs_baseline: None,
        werr_vs_baseline: None,
    };
    if let Some((bname, bck)) = baseline {
        let base = error_rates(&transcribe(bck, utts)?)?;
        report.baseline = Some(bname.into());
        report.baseline_cer = Some(base.cer);
        report.cerr_vs_baseline = Some(relative_reduction(base.cer, rates.cer));
        report.werr_vs_baseline = Some(relative_reduction(base.wer, rates.wer));
    }
    Ok(report)
}

/// Mean per-utterance CER, for quick monitoring.
pub fn mean_utterance_cer(hyps: &[Hypothesis]) -> Result<f64> {
    let total = hyps
        .iter()
        .map(|h| cer(&h.reference, &h.hypothesis))
        .sum::<Result<f64>>()?;
    Ok(total / hyps.len().max(1) as f64)
}

/// Fused encoder outputs `[T, H]` for one wave, from any checkpoint.
pub fn hidden_states(ck: &Checkpoint, wave: &MultiChannelWave) -> Result<(usize, usize, Vec<f32>)> {
    let cfg = &ck.meta.config;
    let mut shell = ParamStore::<f32>::new();
    let mut rng = seeded_rng(cfg.seed);
    let enc = MultiChannelEncoder::new(&mut ParamBuilder::new(&mut shell, &mut rng), &cfg.encoder)?;
    shell.copy_prefix_from(&ck.store, "encoder.")?;
    let feats = ck.meta.norm.normalize(&extract_features(wave)?);
    let mut g = Graph::new(&shell);
    let out = enc.encode(&mut g, &feats, None, None)?;
    let (t, h) = g.dims(out.fused);
    Ok((t, h, g.value(out.fused).data().to_vec()))
}

/// One row of the quantizer comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub amp_activation: String,
    pub phase_activation: String,
    pub cer: f64,
    /// Percent, vs the no-pretraining row.
    pub cerr: Option<f64>,
}

/// Plain-text table: method, activations, CER and CERR.
pub fn format_table(rows: &[TableRow]) -> String {
    let mut s = format!("{:<22} {:<8} {:<8} {:>8} {:>9}\n", "pre-training", "amp", "phase", "CER(%)", "CERR(%)");
    for r in rows {
        let cerr = r.cerr.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
        s.push_str(&format!(
            "{:<22} {:<8} {:<8} {:>8.2} {:>9}\n",
            r.label,
            r.amp_activation,
            r.phase_activation,
            100.0 * r.cer,
            cerr
        ));
    }
    s
}
