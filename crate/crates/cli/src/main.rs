use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mcw2v_core::checkpoint::Checkpoint;
use mcw2v_core::config::RunConfig;
use mcw2v_core::corpus::{build_corpus, Manifest};
use mcw2v_core::dsp::{extract_features, feature_payload, read_wav, write_dump, DumpHeader};
use mcw2v_core::gradcheck::{run_suite, MODULES, TOLERANCE};
use mcw2v_core::nn::Activation;
use mcw2v_core::pipeline::{evaluate, hidden_states, load_utterances, run_finetune, run_pretrain};
use mcw2v_core::pretrain::StepLog;

/// Multi-channel transducer ASR with contrastive pre-training.
#[derive(Parser, Debug)]
#[command(name = "mcw2v", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON file overlaid on the preset; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model size before --config is applied.
    #[arg(long, global = true, default_value = "desk", value_parser = ["desk", "full"])]
    preset: String,
    /// Worker threads for per-utterance work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-channel corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract amplitude and phase features into an MCFEAT01 dump.
    Features {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training of the encoder.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = ["joint", "feature", "channel"])]
        quantizer: Option<String>,
        #[arg(long, value_parser = Activation::NAMES)]
        amp_act: Option<String>,
        #[arg(long, value_parser = Activation::NAMES)]
        phase_act: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transducer fine-tuning from a pre-trained checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint path, or "random".
        #[arg(long, default_value = "random")]
        init: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode a manifest and report CER/WER.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_parser = MODULES.to_vec())]
        module: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fused encoder outputs for one wave as an MCFEAT01 dump.
    HiddenDump {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(global: &Global) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(&global.preset)?;
    if let Some(path) = &global.config {
        cfg = cfg.merge_file(path).with_context(|| format!("loading {}", path.display()))?;
    }
    if let Some(j) = global.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn emit(value: &serde_json::Value) {
    println!("{value}");
}

fn step_line(phase: &str) -> impl FnMut(&StepLog) {
    let phase = phase.to_string();
    move |l: &StepLog| {
        emit(&json!({"phase": phase, "step": l.step, "loss": l.loss, "lr": l.lr, "seconds": l.seconds}));
    }
}

fn finalize(cfg: &RunConfig) -> Result<RunConfig> {
    cfg.validate()?;
    if cfg.jobs > 1 {
        // Fails harmlessly if a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global();
    }
    emit(&json!({"config": cfg, "config_hash": cfg.hash()}));
    Ok(cfg.clone())
}

fn write_dump_file(path: &Path, shape: Vec<usize>, payload: &[f32]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_dump(&mut w, &DumpHeader::new(shape), payload)?;
    w.flush()?;
    Ok(())
}

fn load_manifest(path: &Path, cfg: &RunConfig) -> Result<Vec<mcw2v_core::pipeline::Utterance>> {
    let m = Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
    if m.is_empty() {
        bail!("manifest {} is empty", path.display());
    }
    Ok(load_utterances(&m, cfg.joint.vocab)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.global)?;
    match cli.cmd {
        Command::Synth { out, n_train, n_test, seed } => {
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let cfg = finalize(&cfg)?;
            let (train, test) = build_corpus(&cfg.synth, n_train, n_test, cfg.seed, &out)?;
            emit(&json!({
                "train": out.join("train.jsonl"),
                "test": out.join("test.jsonl"),
                "n_train": train.len(),
                "n_test": test.len(),
            }));
        }
        Command::Features { wav, out } => {
            let wave = read_wav(&wav)?;
            let f = extract_features(&wave)?;
            write_dump_file(&out, vec![f.channels, f.frames, f.dim()], &feature_payload(&f))?;
        }
        Command::Pretrain {
            manifest,
            quantizer,
            amp_act,
            phase_act,
            steps,
            seed,
            out,
        } => {
            if let Some(q) = quantizer {
                cfg.quantizer.method = q;
            }
            if let Some(a) = amp_act {
                cfg.quantizer.amp_activation = a.parse()?;
            }
            if let Some(p) = phase_act {
                cfg.quantizer.phase_activation = p.parse()?;
            }
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let cfg = finalize(&cfg)?;
            let utts = load_manifest(&manifest, &cfg)?;
            let ck = run_pretrain(&cfg, &utts, cfg.pretrain.steps, Some(&out), &mut step_line("pretrain"))?;
            ck.save(&out)?;
        }
        Command::Finetune {
            manifest,
            init,
            steps,
            seed,
            out,
        } => {
            if let Some(s) = steps {
                cfg.finetune.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let init = match init.as_str() {
                "random" => None,
                path => Some(Checkpoint::load(Path::new(path))?),
            };
            if let Some(ck) = &init {
                // The encoder must match the checkpoint it is copied from.
                cfg.encoder = ck.meta.config.encoder.clone();
            }
            let cfg = finalize(&cfg)?;
            let utts = load_manifest(&manifest, &cfg)?;
            let ck = run_finetune(&cfg, &utts, init.as_ref(), cfg.finetune.steps, Some(&out), &mut step_line("finetune"))?;
            ck.save(&out)?;
        }
        Command::Evaluate { manifest, ckpt, baseline } => {
            let ck = Checkpoint::load(&ckpt)?;
            let utts = load_manifest(&manifest, &ck.meta.config)?;
            let base = baseline.as_deref().map(Checkpoint::load).transpose()?;
            let bname = baseline.as_ref().map(|p| p.display().to_string());
            let report = evaluate(
                &ckpt.display().to_string(),
                &ck,
                bname.as_deref().zip(base.as_ref()),
                &utts,
            )?;
            emit(&serde_json::to_value(&report)?);
        }
        Command::Gradcheck { module, seed } => {
            let reports = run_suite(module.as_deref(), seed)?;
            let mut failed = Vec::new();
            for r in &reports {
                emit(&json!({
                    "module": r.module,
                    "max_rel_err": r.max_rel_err,
                    "coordinates": r.coordinates,
                    "pass": r.passed(),
                }));
                if !r.passed() {
                    failed.push(r.module.clone());
                }
            }
            if !failed.is_empty() {
                bail!("gradient check above {TOLERANCE:e} for: {}", failed.join(", "));
            }
        }
        Command::HiddenDump { wav, ckpt, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let wave = read_wav(&wav)?;
            let (t, h, data) = hidden_states(&ck, &wave)?;
            write_dump_file(&out, vec![t, h], &data)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Parse errors exit with status 2 from clap itself.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
