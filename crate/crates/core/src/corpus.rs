//! Synthetic two-channel corpus: tokens are harmonic bursts, the second
//! microphone hears a fractionally delayed copy, and both channels carry
//! independent white noise.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{write_wav, MultiChannelWave, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::params::seeded_rng;
use crate::pretrain::derive_seed;

const SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyz";
/// Half-width of the interpolation kernel, in samples.
const SINC_HALF_WIDTH: i64 = 16;
/// Silence at the end of each token slot.
const GAP_MS: f64 = 20.0;
const RAMP_MS: f64 = 8.0;
const PEAK: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub token_ms: f64,
    /// Interchannel delays are drawn from `[-max_delay, max_delay]` samples.
    pub max_delay: f64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    /// Skip noise entirely.
    pub clean: bool,
    pub sample_rate: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            min_tokens: 3,
            max_tokens: 8,
            token_ms: 120.0,
            max_delay: 4.0,
            snr_db_min: 0.0,
            snr_db_max: 20.0,
            clean: false,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 || self.vocab_size > SYMBOLS.len() {
            return bad("vocab_size must be in 1..=26");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token range must satisfy 1 <= min_tokens <= max_tokens");
        }
        if self.token_ms <= GAP_MS + 2.0 * RAMP_MS {
            return bad("token_ms too short for the burst envelope");
        }
        // Negated so NaN fails too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.max_delay >= 0.0) || !(self.snr_db_min <= self.snr_db_max) {
            return bad("delay and SNR ranges must be non-empty");
        }
        Ok(())
    }

    /// Fundamental of token `v`: half-octave steps apart from 200 Hz upward,
    /// squeezed to fit the vocabulary under 1.6 kHz.
    pub fn f0(&self, v: usize) -> f64 {
        let span = 3.0f64; // octaves
        200.0 * 2f64.powf(span * v as f64 / self.vocab_size.max(1) as f64)
    }

    pub fn token_samples(&self) -> usize {
        (self.token_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }
}

pub fn token_char(v: usize) -> char {
    SYMBOLS.as_bytes()[v] as char
}

pub fn tokens_to_text(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| token_char(t)).collect()
}

pub fn text_to_tokens(text: &str, vocab: usize) -> Result<Vec<usize>> {
    text.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match SYMBOLS.find(c) {
            Some(v) if v < vocab => Ok(v),
            _ => Err(Error::TokenOutOfRange {
                token: c as usize,
                vocab,
            }),
        })
        .collect()
}

/// Delays `x` by `delay` samples (fractional, either sign) with a
/// Hann-windowed sinc kernel.
pub fn fractional_delay(x: &[f64], delay: f64) -> Vec<f64> {
    if delay == 0.0 {
        return x.to_vec();
    }
    let n = x.len() as i64;
    (0..n)
        .map(|i| {
            let pos = i as f64 - delay;
            let centre = pos.floor() as i64;
            let mut acc = 0.0;
            for m in centre - SINC_HALF_WIDTH + 1..=centre + SINC_HALF_WIDTH {
                if m < 0 || m >= n {
                    continue;
                }
                let d = pos - m as f64;
                let w = 0.5 + 0.5 * (PI * d / SINC_HALF_WIDTH as f64).cos();
                let s = if d.abs() < 1e-12 { 1.0 } else { (PI * d).sin() / (PI * d) };
                acc += x[m as usize] * s * w;
            }
            acc
        })
        .collect()
}

/// Drawn per utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub delay: f64,
    /// `None` means no noise.
    pub snr_db: Option<f64>,
}

impl Geometry {
    pub fn draw(cfg: &SynthConfig, rng: &mut impl Rng) -> Self {
        let delay = if cfg.max_delay > 0.0 {
            rng.gen_range(-cfg.max_delay..=cfg.max_delay)
        } else {
            0.0
        };
        let snr_db = (!cfg.clean).then(|| rng.gen_range(cfg.snr_db_min..=cfg.snr_db_max));
        Self { delay, snr_db }
    }
}

fn render_tokens(tokens: &[usize], cfg: &SynthConfig) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let slot = cfg.token_samples();
    let on = slot - (GAP_MS * sr / 1000.0) as usize;
    let ramp = (RAMP_MS * sr / 1000.0) as usize;
    let mut out = vec![0.0; slot * tokens.len()];
    for (i, &v) in tokens.iter().enumerate() {
        let f0 = cfg.f0(v);
        for n in 0..on {
            let env = if n < ramp {
                0.5 - 0.5 * (PI * n as f64 / ramp as f64).cos()
            } else if n + ramp > on {
                0.5 - 0.5 * (PI * (on - n) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let t = n as f64 / sr;
            let mut s = 0.0;
            // Harmonics up to 4 kHz with 1/h rolloff.
            let mut h = 1;
            while h as f64 * f0 < 4000.0 {
                s += (2.0 * PI * h as f64 * f0 * t).sin() / h as f64;
                h += 1;
            }
            out[i * slot + n] = env * s;
        }
    }
    out
}

/// Renders `tokens` as a two-channel wave. Deterministic in `seed`.
pub fn synth_utterance(tokens: &[usize], cfg: &SynthConfig, seed: u64, id: &str) -> Result<MultiChannelWave> {
    synth_with_geometry(tokens, cfg, Geometry::draw(cfg, &mut seeded_rng(seed)), seed)
        .and_then(|samples| MultiChannelWave::new(samples, cfg.sample_rate, id))
}

/// Rendering with a fixed delay and SNR; the noise stream derives from `seed`.
pub fn synth_with_geometry(tokens: &[usize], cfg: &SynthConfig, geo: Geometry, seed: u64) -> Result<Vec<Vec<f64>>> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab: cfg.vocab_size,
        });
    }
    let clean = render_tokens(tokens, cfg);
    let delayed = fractional_delay(&clean, geo.delay);
    let mut chans = vec![clean, delayed];
    if let Some(snr) = geo.snr_db {
        let power = chans[0].iter().map(|x| x * x).sum::<f64>() / chans[0].len().max(1) as f64;
        let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
        let mut rng = seeded_rng(derive_seed(seed, 1, 0));
        for ch in &mut chans {
            for x in ch.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += sigma * z;
            }
        }
    }
    let peak = chans.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let g = PEAK / peak;
        chans.iter_mut().flatten().for_each(|x| *x *= g);
    }
    Ok(chans)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub wav: PathBuf,
    pub text: String,
    pub dur: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative `wav` paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn wav_path(&self, e: &ManifestEntry) -> PathBuf {
        if e.wav.is_absolute() {
            e.wav.clone()
        } else {
            self.root.join(&e.wav)
        }
    }

    /// Reads JSONL; rejects duplicate ids and missing audio files.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (no, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line).map_err(|err| Error::Format {
                what: "manifest",
                reason: format!("line {}: {err}", no + 1),
            })?;
            if !seen.insert(e.id.clone()) {
                return Err(Error::Format {
                    what: "manifest",
                    reason: format!("duplicate id {:?}", e.id),
                });
            }
            entries.push(e);
        }
        let m = Self { entries, root };
        for e in &m.entries {
            let p = m.wav_path(e);
            if !p.is_file() {
                return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Writes `n_train + n_test` utterances under `out_dir/wav` and the
/// manifests `train.jsonl` and `test.jsonl`.
pub fn build_corpus(cfg: &SynthConfig, n_train: usize, n_test: usize, seed: u64, out_dir: &Path) -> Result<(Manifest, Manifest)> {
    cfg.validate()?;
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let entries: Vec<ManifestEntry> = (0..n_train + n_test)
        .into_par_iter()
        .map(|i| {
            let split = if i < n_train { "train" } else { "test" };
            let id = format!("{split}-{i:05}");
            let useed = derive_seed(seed, 0, i as u64);
            let mut rng = seeded_rng(useed);
            let n = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
            let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
            let wave = synth_utterance(&tokens, cfg, derive_seed(useed, 2, 0), &id)?;
            let rel = PathBuf::from("wav").join(format!("{id}.wav"));
            write_wav(&out_dir.join(&rel), &wave)?;
            Ok(ManifestEntry {
                id,
                wav: rel,
                text: tokens_to_text(&tokens),
                dur: wave.duration_s(),
            })
        })
        .collect::<Result<_>>()?;
    let mut entries = entries;
    let test = entries.split_off(n_train);
    let root = out_dir.to_path_buf();
    let train = Manifest {
        entries,
        root: root.clone(),
    };
    let test = Manifest { entries: test, root };
    train.save(&out_dir.join("train.jsonl"))?;
    test.save(&out_dir.join("test.jsonl"))?;
    Ok((train, test))
}
