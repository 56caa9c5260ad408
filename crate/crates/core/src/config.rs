//! Run configuration: every tunable in one JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asr::FinetuneConfig;
use crate::corpus::SynthConfig;
use crate::dsp::FEATURE_DIM;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;
use crate::quantizer::QuantizerConfig;
use crate::train::{AugmentPolicy, OptimConfig};
use crate::transducer::JointConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for per-utterance parallelism.
    pub jobs: usize,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub pretrain: PretrainConfig,
    pub joint: JointConfig,
    pub finetune: FinetuneConfig,
    pub optim: OptimConfig,
    pub augment: AugmentPolicy,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    /// Full-size model dimensions.
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            checkpoint_every: 0,
            encoder: EncoderConfig::default(),
            quantizer: QuantizerConfig::default(),
            pretrain: PretrainConfig::default(),
            joint: JointConfig::default(),
            finetune: FinetuneConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentPolicy::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reduced dimensions that train in minutes on one CPU core.
    pub fn desk() -> Self {
        let encoder = EncoderConfig::desk();
        let hidden = encoder.hidden;
        Self {
            quantizer: QuantizerConfig {
                target_dim: hidden,
                attention_dim: hidden / 2,
                ..QuantizerConfig::default()
            },
            joint: JointConfig::desk(SynthConfig::default().vocab_size),
            optim: OptimConfig {
                warmup_steps: 400,
                ..OptimConfig::default()
            },
            encoder,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::default()),
            other => Err(Error::UnknownName {
                kind: "preset",
                name: other.into(),
                choices: "desk, full".into(),
            }),
        }
    }

    /// Overlays a JSON file on `self`: keys present in the file replace
    /// the current values, unknown keys are rejected.
    pub fn merge_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: serde_json::Value = serde_json::from_str(&text)?;
        self.merge_json(patch)
    }

    pub fn merge_json(&self, patch: serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, patch);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.synth.validate()?;
        if self.encoder.input_dim != FEATURE_DIM {
            return Err(Error::Config(format!("encoder.input_dim must be {FEATURE_DIM}")));
        }
        if self.quantizer.target_dim != self.encoder.hidden {
            return Err(Error::Config("quantizer.target_dim must equal encoder.hidden".into()));
        }
        if self.joint.vocab < self.synth.vocab_size {
            return Err(Error::Config("joint.vocab must cover synth.vocab_size".into()));
        }
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 || self.jobs == 0 {
            return Err(Error::Config("batch sizes and jobs must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        // Left in place so deserialization rejects it.
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}
