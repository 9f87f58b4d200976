//! `vocl`: corpus preparation, training, synthesis and evaluation.
//!
//! Exit codes: 0 success, 1 training aborted on a non-finite loss, 2 I/O
//! error or missing artifact, 3 invalid config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vocl_core::audio::{
    dump_filterbank, load_corpus, read_wav, select_subset, write_manifest, MelExtractor, MelSpectrogram, SplitSpec,
};
use vocl_core::checkpoint::{read_latest, Checkpoint};
use vocl_core::eval::{evaluate_entries, synthesize, Candidate, EvalOptions};
use vocl_core::trainer::{generator_from_checkpoint, run_training, split_spec};
use vocl_core::{Error, TrainConfig};

mod lock;

#[derive(Debug, Parser)]
#[command(name = "vocl", version, about = "GAN vocoder training with auxiliary contrastive tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a corpus directory and dump the mel filterbank.
    Prepare {
        #[arg(long)]
        corpus: PathBuf,
        /// Where to write the filterbank dump.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Optional run config supplying the feature settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write the training-subset manifest for a fraction and seed.
    Subset {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of validation clips (last in sorted order).
        #[arg(long, default_value_t = 150)]
        validation_count: usize,
        /// File of validation clip ids; overrides --validation-count.
        #[arg(long)]
        split_file: Option<PathBuf>,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Checkpoint file, or a run directory to resume from its latest
        /// checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line every this many steps (0 = never).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Vocode mel files (`*.mel`) or wavs (`*.wav`) with a checkpoint.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of raw `.mel` matrices and/or `.wav` files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score vocoded validation clips with log-mel MAE and MCD.
    Eval {
        /// Checkpoint to evaluate. Not needed with --ground-truth.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the reference and generated mel matrices.
        #[arg(long)]
        dump_mels: bool,
        /// Compare each clip with itself instead of vocoding it.
        #[arg(long)]
        ground_truth: bool,
        /// Number of validation clips; defaults to the checkpoint's config.
        #[arg(long)]
        validation_count: Option<usize>,
    },
    /// Check a run config and print the resolved document.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 1,
        Error::Config(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn echo(cfg: &TrainConfig) {
    println!("# resolved config\n{}", cfg.to_toml());
}

fn load_config(path: &Path, overrides: &[String]) -> vocl_core::Result<TrainConfig> {
    let cfg = TrainConfig::load(path, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command) -> vocl_core::Result<()> {
    match cmd {
        Command::Prepare {
            corpus,
            out,
            config,
            overrides,
        } => {
            let cfg = match config {
                Some(p) => load_config(&p, &overrides)?,
                None => TrainConfig::from_toml_with_overrides("", &overrides)?,
            };
            echo(&cfg);
            let c = load_corpus(&corpus, &SplitSpec::LastSorted(0))?;
            if c.sample_rate_hz != cfg.feature.sample_rate_hz {
                return Err(Error::Config(format!(
                    "corpus sample rate {} Hz differs from feature.sample_rate_hz = {}",
                    c.sample_rate_hz, cfg.feature.sample_rate_hz
                )));
            }
            let hours: f64 = c.train.iter().map(|e| e.duration_s).sum::<f64>() / 3600.0;
            let (bin, json) = dump_filterbank(&cfg.feature, &out)?;
            println!(
                "corpus ok: {} clips, {:.3} h at {} Hz\nfilterbank: {}\nfeature config: {}",
                c.train.len(),
                hours,
                c.sample_rate_hz,
                bin.display(),
                json.display()
            );
            Ok(())
        }
        Command::Subset {
            corpus,
            fraction,
            seed,
            out,
            validation_count,
            split_file,
        } => {
            println!("# resolved subset\nfraction = {fraction}\nseed = {seed}");
            let split = match split_file {
                Some(p) => SplitSpec::File(p),
                None => SplitSpec::LastSorted(validation_count),
            };
            let c = load_corpus(&corpus, &split)?;
            let sub = select_subset(&c, fraction, seed)?;
            write_manifest(&sub, &out)?;
            println!("{} of {} training clips -> {}", sub.train.len(), c.train.len(), out.display());
            Ok(())
        }
        Command::Train {
            config,
            overrides,
            resume,
            log_every,
        } => {
            let cfg = load_config(&config, &overrides)?;
            echo(&cfg);
            let resume = match resume {
                Some(p) if p.is_dir() => Some(
                    read_latest(&p)?.ok_or_else(|| Error::Checkpoint(format!("no `latest` pointer in {}", p.display())))?,
                ),
                other => other,
            };
            if let Some(p) = &resume {
                if !p.is_file() {
                    return Err(Error::Checkpoint(format!("checkpoint {} not found", p.display())));
                }
            }
            let corpus = load_corpus(&cfg.corpus_dir, &split_spec(&cfg))?;
            let _lock = lock::OutDirLock::acquire(&cfg.out_dir)?;
            let mut progress = |b: &vocl_core::losses::LossBreakdown, _: &vocl_core::trainer::TrainState| {
                if log_every > 0 && b.step % log_every == 0 {
                    eprintln!(
                        "step {:>7}  l_g {:.4}  l_d {:.4}  l_mel {:.4}  l_cl {:.4}",
                        b.step, b.l_g_total, b.l_d_total, b.l_mel, b.l_cl
                    );
                }
            };
            let state = run_training(&cfg, &corpus, resume.as_deref(), Some(&mut progress))?;
            println!("finished at step {} in {}", state.step, cfg.out_dir.display());
            Ok(())
        }
        Command::Synth { ckpt, input, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            echo(&ck.config);
            let generator = generator_from_checkpoint(&ck)?;
            let ex = MelExtractor::new(&ck.config.feature)?;
            let mut inputs: Vec<PathBuf> = fs::read_dir(&input)
                .map_err(|e| Error::Io {
                    path: input.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| matches!(p.extension().and_then(|s| s.to_str()), Some("mel" | "wav")))
                .collect();
            inputs.sort();
            if inputs.is_empty() {
                return Err(Error::Load(format!("no .mel or .wav files in {}", input.display())));
            }
            fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let mut clipped = 0;
            for p in &inputs {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("out").to_string();
                let mel = if p.extension().and_then(|s| s.to_str()) == Some("mel") {
                    MelSpectrogram::read_raw(p, ck.config.feature.hop_size)?
                } else {
                    ex.mel_spectrogram(&read_wav(p, &stem)?)?
                };
                let s = synthesize(&generator, &mel, ck.config.feature.sample_rate_hz, &out.join(format!("{stem}.wav")))?;
                clipped += s.clipped_samples;
                println!("{} ({} samples, {} clipped)", s.path.display(), s.n_samples, s.clipped_samples);
            }
            println!("{} files, {clipped} clipped samples in total", inputs.len());
            Ok(())
        }
        Command::Eval {
            ckpt,
            corpus,
            out,
            dump_mels,
            ground_truth,
            validation_count,
        } => {
            let ck = match (&ckpt, ground_truth) {
                (Some(p), _) => Some(Checkpoint::load(p)?),
                (None, true) => None,
                (None, false) => return Err(Error::Config("--ckpt is required unless --ground-truth is given".into())),
            };
            let cfg = ck.as_ref().map(|c| c.config.clone()).unwrap_or_default();
            echo(&cfg);
            let split = match validation_count {
                Some(n) => SplitSpec::LastSorted(n),
                None => split_spec(&cfg),
            };
            let c = load_corpus(&corpus, &split)?;
            let generator = match (&ck, ground_truth) {
                (Some(ck), false) => Some(generator_from_checkpoint(ck)?),
                _ => None,
            };
            let candidate = match &generator {
                Some(g) => Candidate::Vocoder(g),
                None => Candidate::GroundTruth,
            };
            let ex = MelExtractor::new(&cfg.feature)?;
            let opts = EvalOptions {
                wav_dir: generator.as_ref().map(|_| out.join("wavs")),
                mel_dir: dump_mels.then(|| out.join("mels")),
            };
            let (report, clipped) = evaluate_entries(&c.validation, &candidate, &ex, &opts)?;
            report.write(&out)?;
            println!(
                "{} clips, {} frames: MAE {:.4} (sd {:.4}), MCD {:.3} dB (sd {:.3}); {clipped} clipped samples",
                report.rows.len(),
                report.total_frames,
                report.mae.mean,
                report.mae.std,
                report.mcd_db.mean,
                report.mcd_db.std
            );
            Ok(())
        }
        Command::ValidateConfig { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            echo(&cfg);
            println!("config ok");
            Ok(())
        }
    }
}
