use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use overflow::data::{generate_corpus, save_corpus, Corpus, CorpusConfig, Split, Utterance};
use overflow::nhmm::SymbolSequence;
use overflow::train::{evaluate, load_model, load_split, normalize_utts, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "overflow",
    about = "Autoregressive neural HMM with an invertible flow post-net: train, synthesize, evaluate, align, verify",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (train/val/test container files).
    GenCorpus {
        /// Corpus config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for train.ofc / val.ofc / test.ofc.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model to the configured number of updates.
    Train {
        /// Training config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample output frames for a symbol sequence and write them as a
    /// single-utterance corpus container.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        /// Whitespace-separated symbol indices, e.g. "0 3 1 4".
        #[arg(long)]
        text: String,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        quantile: Option<f64>,
        /// Keep pre-net dropout active during synthesis.
        #[arg(long)]
        prenet_dropout: bool,
        #[arg(long)]
        max_frames: Option<usize>,
        /// Seed for sampling noise and dropout masks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also print the per-symbol durations used.
        #[arg(long)]
        print_durations: bool,
    },
    /// Print per-frame and per-sequence log-likelihood on a corpus split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Corpus directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        corpus_dir: Option<PathBuf>,
    },
    /// Viterbi-align one utterance and report boundary errors vs ground
    /// truth.
    Align {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        utterance: usize,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        corpus_dir: Option<PathBuf>,
    },
    /// Run the oracle suites (path enumeration, Jacobians, gradient checks,
    /// invertibility, quantile durations); nonzero exit on any failure.
    Verify,
}

fn parse_symbols(text: &str) -> Result<SymbolSequence> {
    let symbols: Vec<usize> = text
        .split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .with_context(|| format!("bad symbol index {tok:?}"))
        })
        .collect::<Result<_>>()?;
    if symbols.is_empty() {
        bail!("--text must contain at least one symbol index");
    }
    Ok(SymbolSequence::new(symbols))
}

fn split_utterances<'c>(corpus: &'c Corpus, wanted: &str) -> Result<&'c Corpus> {
    let got = corpus.split.name();
    if got != wanted {
        bail!("corpus file holds the {got} split, expected {wanted}");
    }
    Ok(corpus)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenCorpus { config, out } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg: CorpusConfig = toml::from_str(&text).context("parsing corpus config")?;
            let set = generate_corpus(&cfg)?;
            std::fs::create_dir_all(&out)?;
            for (corpus, name) in [(&set.train, "train"), (&set.val, "val"), (&set.test, "test")] {
                let path = out.join(format!("{name}.ofc"));
                save_corpus(corpus, &path)?;
                println!(
                    "wrote {} ({} utterances)",
                    path.display(),
                    corpus.utterances.len()
                );
            }
            Ok(())
        }
        Command::Train { config, resume } => {
            let cfg = TrainConfig::load(&config)?;
            let outcome = train(&cfg, resume.as_deref())?;
            println!(
                "trained to step {} (train nll/frame {:.4} -> {:.4})",
                outcome.final_step, outcome.first_train_nll, outcome.final_train_nll
            );
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            println!("metrics:    {}", outcome.metrics_path.display());
            Ok(())
        }
        Command::Synthesize {
            ckpt,
            text,
            temperature,
            quantile,
            prenet_dropout,
            max_frames,
            seed,
            out,
            print_durations,
        } => {
            let loaded = load_model(&ckpt)?;
            let seq = parse_symbols(&text)?;
            let temperature = temperature.unwrap_or(loaded.train_config.temperature);
            let quantile = quantile.unwrap_or(loaded.train_config.quantile);
            let max_frames = max_frames.unwrap_or(loaded.train_config.max_frames);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let synth = loaded.model.synthesize(
                &seq,
                temperature,
                quantile,
                prenet_dropout,
                max_frames,
                &mut rng,
            )?;
            // back to data space
            let frames = loaded.stats.invert(&synth.frames);
            let mut boundaries = Vec::with_capacity(synth.symbol_durations.len());
            let mut t = 0usize;
            for &d in &synth.symbol_durations {
                boundaries.push((t, d));
                t += d;
            }
            let corpus = Corpus {
                config: loaded.corpus_config.clone(),
                split: Split::Test,
                utterances: vec![Utterance {
                    symbols: seq,
                    frames,
                    boundaries,
                }],
            };
            save_corpus(&corpus, &out)?;
            println!(
                "synthesized {} frames (temperature {temperature}, quantile {quantile}, dropout {})",
                t,
                if prenet_dropout { "on" } else { "off" }
            );
            if print_durations {
                println!("symbol durations: {:?}", synth.symbol_durations);
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Evaluate {
            ckpt,
            split,
            corpus_dir,
        } => {
            let loaded = load_model(&ckpt)?;
            let dir = corpus_dir.unwrap_or_else(|| loaded.train_config.corpus_dir.clone());
            let corpus = load_split(&dir, &split)?;
            split_utterances(&corpus, &split)?;
            let utts = normalize_utts(&loaded.stats, &corpus.utterances);
            let summary = evaluate(&loaded.model, &utts)?;
            println!(
                "split={split} sequences={} frames={}",
                summary.sequences, summary.frames
            );
            println!("per-frame loglik: {:.6}", summary.per_frame_loglik);
            println!("per-frame nll:    {:.6}", summary.per_frame_nll);
            println!("per-seq loglik:   {:.6}", summary.per_seq_loglik);
            Ok(())
        }
        Command::Align {
            ckpt,
            utterance,
            split,
            corpus_dir,
        } => {
            let loaded = load_model(&ckpt)?;
            let dir = corpus_dir.unwrap_or_else(|| loaded.train_config.corpus_dir.clone());
            let corpus = load_split(&dir, &split)?;
            split_utterances(&corpus, &split)?;
            if utterance >= corpus.utterances.len() {
                bail!(
                    "utterance {utterance} out of range ({} in split {split})",
                    corpus.utterances.len()
                );
            }
            let utt = &corpus.utterances[utterance];
            let frames = loaded.stats.apply(&utt.frames);
            let (path, score) = loaded.model.align(&frames, &utt.symbols)?;
            let sps = loaded.model.config.states_per_symbol;
            let pred = path.symbol_durations(sps);
            let truth: Vec<usize> = utt.boundaries.iter().map(|&(_, len)| len).collect();
            println!("symbols:          {:?}", utt.symbols.symbols());
            println!("viterbi logprob:  {score:.6}");
            println!("state path:       {:?}", path.states());
            println!("pred durations:   {pred:?}");
            println!("truth durations:  {truth:?}");
            let mut pred_end = 0usize;
            let mut true_end = 0usize;
            let mut errors = Vec::new();
            for i in 0..pred.len().saturating_sub(1) {
                pred_end += pred[i];
                true_end += truth[i];
                errors.push((pred_end as isize - true_end as isize).unsigned_abs());
            }
            println!("boundary errors:  {errors:?}");
            if !errors.is_empty() {
                let mut sorted = errors.clone();
                sorted.sort_unstable();
                println!("median abs error: {}", sorted[sorted.len() / 2]);
            }
            Ok(())
        }
        Command::Verify => {
            let results = overflow::check::run_all_suites();
            let mut all_ok = true;
            for r in &results {
                println!(
                    "{}: {} ({}) [{:.2?}]",
                    r.name,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.detail,
                    r.elapsed
                );
                all_ok &= r.passed;
            }
            if !all_ok {
                bail!("one or more verification suites failed");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
