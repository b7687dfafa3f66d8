use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use musdiff_core::complexity::{model_block_flops, profile, profile_csv, ProfileOptions};
use musdiff_core::diffusion::{NoiseSchedule, ScheduleKind};
use musdiff_core::eval::{evaluate, EvalOptions};
use musdiff_core::model::{BlockOrder, Model};
use musdiff_core::remi::{decode, io, midi_to_tokens, write_midi, RemiVocab};
use musdiff_core::sampler::{batch_generate, DecodePolicy, SamplerConfig};
use musdiff_core::train::{ablate, ingest, train, Checkpoint, TrainConfig, CHECKPOINT_MAGIC};
use rand::{Rng, SeedableRng};

/// Discrete diffusion over REMI music tokens with a Mamba/attention denoiser.
#[derive(Parser, Debug)]
#[command(name = "musdiff", version)]
struct Cli {
    /// Run everything on the calling thread. Execution is already
    /// single-threaded, so this only makes the requirement explicit.
    #[arg(long, global = true)]
    deterministic: bool,

    /// More log output (-v debug, -vv trace). RUST_LOG overrides it.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TokenFormat {
    Text,
    Binary,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scale {
    Desk,
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode every MIDI file of a directory into REMI token files.
    Tokenize {
        midi_dir: PathBuf,
        out_dir: PathBuf,
        /// Output format: one line of token ids per sequence, or packed records.
        #[arg(long, value_enum, default_value = "text")]
        format: TokenFormat,
        /// Grid positions per bar.
        #[arg(long, default_value_t = 16)]
        positions_per_bar: usize,
        /// Longest duration in grid units.
        #[arg(long, default_value_t = 64)]
        max_duration: usize,
    },
    /// Decode one sequence of a token file to MIDI.
    Detokenize {
        tokens: PathBuf,
        out: PathBuf,
        /// Which sequence of the file to decode.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Keep only the first N bars.
        #[arg(long)]
        bars: Option<u64>,
        #[arg(long, default_value_t = 16)]
        positions_per_bar: usize,
        #[arg(long, default_value_t = 64)]
        max_duration: usize,
    },
    /// Print a default training config (TOML) to stdout.
    InitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        scale: Scale,
    },
    /// Train a model from a config file.
    Train {
        config: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Override `steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Override `batch_size`.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Override `lr`.
        #[arg(long)]
        lr: Option<f64>,
        /// Override `warmup_steps`.
        #[arg(long)]
        warmup_steps: Option<u64>,
        /// Override `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `checkpoint_every`.
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Override `data_dir`.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Override `out_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate clips from a checkpoint or model file.
    Sample {
        checkpoint: PathBuf,
        /// Number of clips.
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Tokens per clip.
        #[arg(long, default_value_t = 256)]
        length: usize,
        /// Seed of the first clip; clip i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reverse steps; fewer than the trained T subsamples the chain.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// `sample` draws from the reverse distribution, `greedy` takes the argmax.
        #[arg(long, default_value = "sample")]
        policy: DecodePolicy,
        /// Keep only the first N bars of each decoded clip.
        #[arg(long)]
        bars: Option<u64>,
        /// Noise schedule for bare model files (checkpoints carry their own).
        #[arg(long)]
        schedule: Option<ScheduleKind>,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
        /// Also write `<clip>.trace.csv` with the masked count per step.
        #[arg(long)]
        trace: bool,
    },
    /// Overlap-area comparison of generated clips against a reference set.
    EvalOa {
        gen_dir: PathBuf,
        ref_dir: PathBuf,
        /// Bootstrap resamples for the mean ± std columns.
        #[arg(long, default_value_t = 20)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Analytic FLOPs and measured forward time per sequence length.
    Profile {
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        /// Model size, unless --config is given.
        #[arg(long, value_enum, default_value = "desk")]
        scale: Scale,
        /// Take the model section of this training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build block-order variants and train each for one step.
    Ablate {
        /// MFA, AFM, FMA or MFA-2SA; repeat or comma-separate. Defaults to all four.
        #[arg(long, value_delimiter = ',')]
        order: Vec<BlockOrder>,
        /// Training config; the desk config when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override `data_dir`.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Use this many random token windows instead of a data directory.
        #[arg(long)]
        synthetic: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if cli.deterministic {
        log::debug!("deterministic mode: single-threaded execution");
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Tokenize {
            midi_dir,
            out_dir,
            format,
            positions_per_bar,
            max_duration,
        } => tokenize(
            &midi_dir,
            &out_dir,
            format,
            &RemiVocab::new(positions_per_bar, max_duration)?,
        ),
        Command::Detokenize {
            tokens,
            out,
            index,
            bars,
            positions_per_bar,
            max_duration,
        } => detokenize(
            &tokens,
            &out,
            index,
            bars,
            &RemiVocab::new(positions_per_bar, max_duration)?,
        ),
        Command::InitConfig { scale } => {
            print!("{}", scale_config(scale).to_toml());
            Ok(())
        }
        Command::Train {
            config,
            resume,
            steps,
            batch_size,
            lr,
            warmup_steps,
            seed,
            checkpoint_every,
            data_dir,
            out_dir,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            macro_rules! set {
                ($($f:ident),*) => { $(if let Some(v) = $f { cfg.$f = v; })* };
            }
            set!(
                steps,
                batch_size,
                lr,
                warmup_steps,
                seed,
                checkpoint_every,
                data_dir,
                out_dir
            );
            cfg.validate()?;
            let outcome = train(&cfg, resume)?;
            if let Some(last) = outcome.losses.last() {
                println!("step {} loss {:.6}", last.step, last.loss);
            }
            println!("wrote {}", outcome.out_dir.display());
            Ok(())
        }
        Command::Sample {
            checkpoint,
            n,
            length,
            seed,
            steps,
            temperature,
            policy,
            bars,
            schedule,
            out,
            trace,
        } => {
            let (model, kind, vocab) = load_for_sampling(&checkpoint, schedule)?;
            let t = model.config().diffusion_steps;
            let sched = NoiseSchedule::new(t, kind)?;
            let cfg = SamplerConfig {
                length,
                steps: steps.unwrap_or(t),
                temperature,
                seed,
                policy,
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (i, g) in batch_generate(&model, &sched, &cfg, n)?
                .into_iter()
                .enumerate()
            {
                let stem = out.join(format!("sample-{i:04}"));
                let (mut score, diag) = decode(&g.tokens, &vocab);
                if let Some(b) = bars {
                    score = score.truncate_bars(b);
                }
                if diag.dropped > 0 {
                    log::warn!("sample {i}: {} ungrammatical tokens dropped", diag.dropped);
                }
                if trace {
                    write(&stem.with_extension("trace.csv"), g.trace_csv().as_bytes())?;
                }
                write(
                    &stem.with_extension("txt"),
                    io::tokens_to_text(&[g.tokens]).as_bytes(),
                )?;
                write(&stem.with_extension("mid"), &write_midi(&score))?;
            }
            println!("wrote {n} clips to {}", out.display());
            Ok(())
        }
        Command::EvalOa {
            gen_dir,
            ref_dir,
            bootstrap,
            seed,
            csv,
        } => {
            let report = evaluate(
                &gen_dir,
                &ref_dir,
                &RemiVocab::default(),
                &EvalOptions { bootstrap, seed },
            )?;
            eprintln!("{}", report.to_table());
            match csv {
                Some(p) => write(&p, report.to_csv().as_bytes()),
                None => {
                    print!("{}", report.to_csv());
                    Ok(())
                }
            }
        }
        Command::Profile {
            lengths,
            scale,
            config,
            runs,
            warmup,
            out,
        } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => scale_config(scale),
            };
            for &l in &lengths {
                log::debug!(
                    "analytic block FLOPs at {l}: {}",
                    model_block_flops(&cfg.model, l)?
                );
            }
            let rows = profile(
                &cfg.model,
                &lengths,
                &ProfileOptions {
                    warmup,
                    runs,
                    seed: cfg.seed,
                },
            )?;
            match out {
                Some(p) => write(&p, profile_csv(&rows).as_bytes()),
                None => {
                    print!("{}", profile_csv(&rows));
                    Ok(())
                }
            }
        }
        Command::Ablate {
            order,
            config,
            data_dir,
            synthetic,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::desk(),
            };
            if let Some(d) = data_dir {
                cfg.data_dir = d;
            }
            let windows = match synthetic {
                Some(n) => random_windows(&cfg, n),
                None => ingest(&cfg.data_dir, &cfg.vocab()?, cfg.seq_len)?.windows,
            };
            let orders = if order.is_empty() {
                BlockOrder::ALL.to_vec()
            } else {
                order
            };
            println!("order,params,mamba_layers_per_block,attention_layers_per_block,loss");
            for o in orders {
                let r = ablate(&cfg, o, windows.clone())?;
                println!(
                    "{},{},{},{},{}",
                    o.as_str(),
                    r.params,
                    r.mamba_layers_per_block,
                    r.attention_layers_per_block,
                    r.loss
                );
            }
            Ok(())
        }
    }
}

fn scale_config(scale: Scale) -> TrainConfig {
    match scale {
        Scale::Desk => TrainConfig::desk(),
        Scale::Full => TrainConfig::full(),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    musdiff_core::util::write_atomic(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
}

fn tokenize(midi_dir: &Path, out_dir: &Path, format: TokenFormat, vocab: &RemiVocab) -> Result<()> {
    if !midi_dir.is_dir() {
        bail!("input directory {} does not exist", midi_dir.display());
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(midi_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    paths.sort();
    let (mut ok, mut skipped) = (0, 0);
    for p in &paths {
        let tokens = match std::fs::read(p)
            .map_err(anyhow::Error::from)
            .and_then(|b| Ok(midi_to_tokens(&b, vocab)?))
        {
            Ok(t) => t,
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                skipped += 1;
                continue;
            }
        };
        let stem = out_dir.join(p.file_stem().unwrap_or_default());
        match format {
            TokenFormat::Text => write(
                &stem.with_extension("txt"),
                io::tokens_to_text(&[tokens]).as_bytes(),
            )?,
            TokenFormat::Binary => write(
                &stem.with_extension("remi"),
                &io::tokens_to_binary(&[tokens], vocab.size())?,
            )?,
        }
        ok += 1;
    }
    println!("tokenized {ok} files, skipped {skipped}");
    Ok(())
}

fn detokenize(
    tokens: &Path,
    out: &Path,
    index: usize,
    bars: Option<u64>,
    vocab: &RemiVocab,
) -> Result<()> {
    let bytes = std::fs::read(tokens).with_context(|| format!("reading {}", tokens.display()))?;
    let seqs = if io::is_binary(&bytes) {
        io::tokens_from_binary(&bytes, Some(vocab.size()))?
    } else {
        io::tokens_from_text(
            std::str::from_utf8(&bytes).context("token file is not UTF-8")?,
            vocab.size(),
        )?
    };
    let Some(seq) = seqs.get(index) else {
        bail!(
            "{} holds {} sequences, no index {index}",
            tokens.display(),
            seqs.len()
        );
    };
    let (mut score, diag) = decode(seq, vocab);
    if let Some(b) = bars {
        score = score.truncate_bars(b);
    }
    if diag.dropped > 0 {
        log::warn!("{} ungrammatical tokens dropped", diag.dropped);
    }
    write(out, &write_midi(&score))?;
    println!("{} notes written to {}", score.notes().len(), out.display());
    Ok(())
}

/// Model, schedule kind and vocabulary for sampling. Training checkpoints
/// carry their config; bare model files fall back to `schedule` or uniform.
fn load_for_sampling(
    path: &Path,
    schedule: Option<ScheduleKind>,
) -> Result<(Model, ScheduleKind, RemiVocab)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ck = Checkpoint::from_bytes(&bytes)?;
        let cfg = TrainConfig::from_toml(&ck.config_toml)?;
        let kind = schedule.unwrap_or(cfg.noise_schedule);
        return Ok((ck.model, kind, cfg.vocab()?));
    }
    let model = Model::from_bytes(&bytes, None)?;
    let vocab = RemiVocab::default();
    if model.config().vocab_size != vocab.size() {
        bail!(
            "model vocabulary {} does not match the default REMI vocabulary {}; sample from a training checkpoint",
            model.config().vocab_size,
            vocab.size()
        );
    }
    Ok((model, schedule.unwrap_or_default(), vocab))
}

fn random_windows(cfg: &TrainConfig, n: usize) -> Vec<Vec<usize>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    // ordinary tokens only: PAD and MASK sit at the top of the vocabulary
    let top = cfg.model.pad_token.unwrap_or(cfg.model.mask_token());
    (0..n.max(1))
        .map(|_| (0..cfg.seq_len).map(|_| rng.random_range(0..top)).collect())
        .collect()
}
