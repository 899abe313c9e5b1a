//! `rnmt`: data preparation, training, inference and evaluation for robust
//! ASR-transcript translation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use robust_nmt::align::{align_documents, filter_by_wer, read_documents, read_pairs, write_pairs};
use robust_nmt::eval::{
    bleu, parse_reports, render_curves, translate, EvalReport, InputCondition,
};
use robust_nmt::model::Checkpoint;
use robust_nmt::noise::{corpus_wer, NoiseChannel, NoiseConfig};
use robust_nmt::text::{
    load_corpus, read_lines, write_sentences, Sentence, TokenizeMode, TranscriptionPair,
};
use robust_nmt::toy::ToyTask;
use robust_nmt::training::{read_loss_log, train, RunDir, TrainingConfig};

#[derive(Parser)]
#[command(name = "rnmt", version, about = "Robust translation of ASR transcripts")]
struct Cli {
    /// TOML configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Re-segment automatic transcript documents against manual ones.
    Align {
        /// Automatic transcripts, documents separated by blank lines.
        #[arg(long)]
        auto: PathBuf,
        /// Manual transcripts, one sentence per line, same document layout.
        #[arg(long)]
        manual: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Drop the highest-WER fraction of aligned pairs.
    Filter {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long)]
        drop_fraction: Option<f64>,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Corrupt a clean corpus with the synthetic noise channel.
    MakeNoise {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Also write `noisy<TAB>clean<TAB>wer` pairs here.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Train a model from a TOML run configuration.
    Train {
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Initialize from this checkpoint instead of data.baseline_checkpoint.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Greedy translation, one input line per output line.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Corpus BLEU of hypotheses (or of a checkpoint's translations) against references.
    Evaluate {
        #[arg(long, conflicts_with = "checkpoint")]
        hyp: Option<PathBuf>,
        #[arg(long, requires = "input")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, short)]
        reference: PathBuf,
        #[arg(long)]
        smoothing: bool,
        /// Append an evaluation record to this file.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "dev")]
        dataset: String,
        #[arg(long, default_value = "clean")]
        condition: InputCondition,
        #[arg(long)]
        step: Option<u64>,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
    },
    /// Render evaluation records and loss logs as tab-separated curve files.
    Report {
        #[arg(long, num_args = 1..)]
        evals: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        loss_log: Vec<PathBuf>,
        #[arg(long, short)]
        output_dir: PathBuf,
    },
    /// Write the synthetic toy dataset and matching run configurations.
    ToyData {
        #[arg(long, short)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 5000)]
        pairs: usize,
        #[arg(long, default_value_t = 5000)]
        transcriptions: usize,
        #[arg(long, default_value_t = 300)]
        test: usize,
    },
}

/// Settings for the subcommands that have no dedicated configuration type.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ToolConfig {
    filter: FilterSection,
    translate: TranslateSection,
    evaluate: EvaluateSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FilterSection {
    drop_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TranslateSection {
    max_len: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateSection {
    max_n: Option<usize>,
    smoothing: Option<bool>,
    max_len: Option<usize>,
}

const DEFAULT_MAX_LEN: usize = 100;
const DEFAULT_DROP_FRACTION: f64 = 0.001;

fn read_config_text(path: Option<&Path>) -> Result<Option<String>> {
    path.map(|p| fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())))
        .transpose()
}

fn tool_config(path: Option<&Path>) -> Result<ToolConfig> {
    match read_config_text(path)? {
        Some(text) => Ok(toml::from_str(&text).context("parsing config")?),
        None => Ok(ToolConfig::default()),
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Align {
            auto,
            manual,
            output,
        } => {
            tool_config(config)?;
            let (pairs, stats) = align_documents(&read_documents(&auto)?, &read_documents(&manual)?)?;
            write_pairs(&output, &pairs)?;
            println!(
                "documents\t{}\npairs\t{}\tdropped_empty\t{}",
                stats.documents, stats.pairs, stats.dropped_empty
            );
        }
        Command::Filter {
            input,
            drop_fraction,
            output,
        } => {
            let cfg = tool_config(config)?;
            let f = drop_fraction
                .or(cfg.filter.drop_fraction)
                .unwrap_or(DEFAULT_DROP_FRACTION);
            let pairs = read_pairs(&input)?;
            let before = pairs.len();
            let kept = filter_by_wer(pairs, f)?;
            write_pairs(&output, &kept)?;
            println!("kept\t{}\tof\t{}", kept.len(), before);
        }
        Command::MakeNoise {
            input,
            output,
            pairs,
        } => {
            let mut noise: NoiseConfig = match read_config_text(config)? {
                Some(text) => toml::from_str(&text).context("parsing noise config")?,
                None => NoiseConfig::default(),
            };
            if let Some(seed) = cli.seed {
                noise.seed = seed;
            }
            let clean = load_corpus(&input, TokenizeMode::Clean)?;
            let mut vocab: Vec<String> = clean.iter().flat_map(|s| s.tokens().iter().cloned()).collect();
            vocab.sort();
            vocab.dedup();
            let channel = NoiseChannel::new(noise, &vocab)?;
            let noisy = channel.corrupt_corpus(&clean);
            write_sentences(&output, &noisy)?;
            if let Some(p) = pairs {
                let rows = noisy
                    .iter()
                    .zip(&clean)
                    .map(|(a, m)| {
                        Ok(TranscriptionPair {
                            auto: a.clone(),
                            manual: m.clone(),
                            wer: robust_nmt::align::wer(a, m)?,
                        })
                    })
                    .collect::<robust_nmt::Result<Vec<_>>>()?;
                write_pairs(&p, &rows)?;
            }
            println!("sentences\t{}\twer\t{:.4}", noisy.len(), corpus_wer(&noisy, &clean));
        }
        Command::Train {
            output_dir,
            steps,
            baseline,
        } => {
            let text = read_config_text(config)?.context("train requires --config")?;
            let mut cfg = TrainingConfig::from_toml(&text)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if baseline.is_some() {
                cfg.data.baseline_checkpoint = baseline;
            }
            let out = output_dir
                .or_else(|| cfg.data.output_dir.clone())
                .context("no output directory (use --output-dir or data.output_dir)")?;
            let base = cfg
                .data
                .baseline_checkpoint
                .as_deref()
                .map(Checkpoint::load)
                .transpose()?;
            let data = cfg.data.load(base.as_ref())?;
            let effective = toml::to_string(&cfg).context("serializing config")?;
            let dir = RunDir::create(&out, Some(&effective))?;
            let outcome = train(&cfg, &data, base.as_ref(), Some(&dir))?;
            if let Some(last) = outcome.log.last() {
                println!("{}", robust_nmt::training::LossBreakdown::tsv_header());
                println!("{}", last.to_tsv());
            }
            println!("checkpoint\t{}", dir.checkpoint_path(cfg.steps).display());
        }
        Command::Translate {
            checkpoint,
            input,
            output,
            max_len,
        } => {
            let cfg = tool_config(config)?;
            let max_len = max_len.or(cfg.translate.max_len).unwrap_or(DEFAULT_MAX_LEN);
            let ckpt = Checkpoint::load(&checkpoint)?;
            let out = translate(&ckpt, &read_lines(&input)?, max_len)?;
            write_sentences(&output, &out)?;
        }
        Command::Evaluate {
            hyp,
            checkpoint,
            input,
            reference,
            smoothing,
            report,
            dataset,
            condition,
            step,
            alpha,
            beta,
        } => {
            let cfg = tool_config(config)?;
            let refs = load_lines_as_sentences(&reference)?;
            let (cands, ckpt_step) = match (hyp, checkpoint, input) {
                (Some(h), _, _) => (load_lines_as_sentences(&h)?, None),
                (None, Some(c), Some(i)) => {
                    let ckpt = Checkpoint::load(&c)?;
                    let max_len = cfg.evaluate.max_len.unwrap_or(DEFAULT_MAX_LEN);
                    (translate(&ckpt, &read_lines(&i)?, max_len)?, Some(ckpt.step))
                }
                _ => bail!("evaluate needs --hyp, or --checkpoint with --input"),
            };
            let score = bleu(
                &cands,
                &refs,
                cfg.evaluate.max_n.unwrap_or(4),
                smoothing || cfg.evaluate.smoothing.unwrap_or(false),
            )?;
            println!("BLEU\t{:.2}", score.score);
            if let Some(path) = report {
                let record = EvalReport {
                    dataset,
                    condition,
                    step: step.or(ckpt_step).unwrap_or(0),
                    alpha,
                    beta,
                    bleu: score,
                };
                let mut text = fs::read_to_string(&path).unwrap_or_default();
                if text.is_empty() {
                    text.push_str(EvalReport::tsv_header());
                    text.push('\n');
                }
                text.push_str(&record.to_tsv());
                text.push('\n');
                fs::write(&path, text)?;
            }
        }
        Command::Report {
            evals,
            loss_log,
            output_dir,
        } => {
            tool_config(config)?;
            fs::create_dir_all(&output_dir)?;
            let mut reports = Vec::new();
            for p in &evals {
                reports.extend(parse_reports(&fs::read_to_string(p)?)?);
            }
            fs::write(output_dir.join("bleu_curves.tsv"), render_curves(&reports))?;
            if !loss_log.is_empty() {
                let mut text = String::from("run\tstep\tl_normal\tl_enc\tl_dec\ttotal\n");
                for (i, p) in loss_log.iter().enumerate() {
                    if i > 0 {
                        text.push('\n');
                    }
                    let run = p
                        .parent()
                        .and_then(Path::file_name)
                        .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
                    for row in read_loss_log(p)? {
                        text.push_str(&format!("{run}\t{}\n", row.to_tsv()));
                    }
                }
                fs::write(output_dir.join("loss_curves.tsv"), text)?;
            }
            println!("curves\t{}", output_dir.display());
        }
        Command::ToyData {
            output_dir,
            pairs,
            transcriptions,
            test,
        } => {
            tool_config(config)?;
            write_toy_data(&output_dir, cli.seed.unwrap_or(1), pairs, transcriptions, test)?;
        }
    }
    Ok(())
}

fn load_lines_as_sentences(path: &Path) -> Result<Vec<Sentence>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| robust_nmt::text::tokenize(l, TokenizeMode::Clean).unwrap_or_default())
        .collect())
}

fn write_toy_data(dir: &Path, seed: u64, pairs: usize, transcriptions: usize, test: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let dir = dir.canonicalize()?;
    let task = ToyTask::default();
    let par = task.parallel(pairs, seed);
    write_sentences(&dir.join("train.src"), &par.iter().map(|p| p.source.clone()).collect::<Vec<_>>())?;
    write_sentences(&dir.join("train.tgt"), &par.iter().map(|p| p.target.clone()).collect::<Vec<_>>())?;

    // Transcripts as documents: one unsegmented automatic stream per
    // document, manual transcripts one sentence per line.
    let trans = task.transcriptions(transcriptions, seed.wrapping_add(1))?;
    let (mut auto_doc, mut manual_doc) = (Vec::new(), Vec::new());
    for (d, chunk) in trans.chunks(10).enumerate() {
        if d > 0 {
            auto_doc.push(String::new());
            manual_doc.push(String::new());
        }
        let stream: Vec<String> = chunk.iter().map(|t| t.auto.to_string()).collect();
        auto_doc.push(stream.join(" "));
        manual_doc.extend(chunk.iter().map(|t| t.manual.to_string()));
    }
    write_lines(&dir.join("transcripts.auto"), &auto_doc)?;
    write_lines(&dir.join("transcripts.manual"), &manual_doc)?;

    let held = task.transcriptions(test, seed.wrapping_add(2))?;
    let refs: Vec<Sentence> = held.iter().map(|t| task.translate(&t.manual)).collect();
    write_sentences(&dir.join("test.clean"), &held.iter().map(|t| t.manual.clone()).collect::<Vec<_>>())?;
    write_sentences(&dir.join("test.noisy"), &held.iter().map(|t| t.auto.clone()).collect::<Vec<_>>())?;
    write_sentences(&dir.join("test.ref"), &refs)?;

    let model = "[model]\nnum_layers = 1\nd_model = 32\nffn_size = 64\nnum_heads = 4\nmax_positions = 64\n";
    let common = format!(
        "seed = {seed}\nparallel_batch = 32\ntranscription_batch = 32\n\n[schedule]\npeak_lr = 0.003\nwarmup_steps = 100\n\n{model}"
    );
    let data = |extra: &str| {
        format!(
            "\n[data]\nparallel_source = {:?}\nparallel_target = {:?}\ntranscriptions = {:?}\n{extra}",
            dir.join("train.src"),
            dir.join("train.tgt"),
            dir.join("transcripts.tsv"),
        )
    };
    fs::write(
        dir.join("baseline.toml"),
        format!("steps = 2000\n{common}{}", data(&format!("output_dir = {:?}\n", dir.join("runs/baseline")))),
    )?;
    fs::write(
        dir.join("adversarial.toml"),
        format!(
            "steps = 1000\n{common}\n[weights]\nalpha = 0.5\nbeta = 0.5\n{}",
            data(&format!(
                "output_dir = {:?}\nbaseline_checkpoint = {:?}\n",
                dir.join("runs/adversarial"),
                dir.join("runs/baseline/ckpt-2000")
            ))
        ),
    )?;
    println!("toy data\t{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
