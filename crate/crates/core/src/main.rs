//! Command-line entry points for the lab: dataset generation, training,
//! evaluation, ablations, tokenizer utilities and a gradient self-check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmfn::config::RunConfig;
use mmfn::data::{self, Split, SyntheticSpec};
use mmfn::harness::{self, AblationProtocol, HarnessError};
use mmfn::text;

#[derive(Parser)]
#[command(name = "mmfn", about = "multimodal fake-news detection lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape/caption dataset.
    GenData {
        /// Optional `key = value` spec file (num_records, mismatch_rate, ...).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Optional metrics CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation protocol and write its CSV.
    Ablate {
        /// `modality` or `modules`.
        #[arg(long)]
        protocol: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the reverse-mode gradients.
    Gradcheck,
    /// Train a tokenizer on a manifest, or inspect an existing vocab.
    Tokenize {
        #[arg(long)]
        vocab: PathBuf,
        /// Train a new vocab from this dataset directory instead of loading.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        vocab_size: usize,
        /// Text to round-trip through the tokenizer.
        #[arg(long)]
        text: Option<String>,
    },
}

// exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence
fn code_for(err: &HarnessError) -> u8 {
    match err {
        HarnessError::Diverged { .. } => 4,
        HarnessError::Config(_) => 2,
        HarnessError::Data(_) | HarnessError::Vision(_) | HarnessError::EmptySplit(_) => 3,
        HarnessError::Checkpoint(_) | HarnessError::Text(_) => 3,
        _ => 1,
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, mmfn::config::ConfigError> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_dataset(
    dir: &PathBuf,
) -> Result<(Vec<data::NewsRecord>, data::SplitManifest, data::IngestStats), data::DataError> {
    data::ingest_manifest(&dir.join("manifest.tsv"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { spec, out } => {
            let spec = match spec {
                Some(p) => match std::fs::read_to_string(&p) {
                    Ok(s) => match SyntheticSpec::from_str(&s) {
                        Ok(spec) => spec,
                        Err(e) => return fail(2, e),
                    },
                    Err(e) => return fail(3, e),
                },
                None => SyntheticSpec::default(),
            };
            let (records, manifest) = match data::generate_synthetic(&spec) {
                Ok(t) => t,
                Err(e) => return fail(3, e),
            };
            if let Err(e) = data::save_dataset(&out, &records, &manifest) {
                return fail(3, e);
            }
            let fake = records.iter().filter(|r| r.label == 1).count();
            println!(
                "wrote {} records to {} (train {} / val {} / test {}, fake {} / real {})",
                records.len(),
                out.display(),
                manifest.train.len(),
                manifest.val.len(),
                manifest.test.len(),
                fake,
                records.len() - fake
            );
            ExitCode::SUCCESS
        }
        Command::Train {
            config,
            data: data_dir,
            out,
            trace,
        } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(2, e),
            };
            let (records, manifest, stats) = match load_dataset(&data_dir) {
                Ok(t) => t,
                Err(e) => return fail(3, e),
            };
            if stats.dropped + stats.malformed > 0 {
                eprintln!(
                    "warning: skipped {} malformed rows, {} undecodable images",
                    stats.malformed, stats.dropped
                );
            }
            let outcome = match harness::train(&cfg, &records, &manifest) {
                Ok(o) => o,
                Err(e) => return fail(code_for(&e), e),
            };
            if let Err(e) = harness::save_outcome(&out, &cfg, &outcome) {
                return fail(3, e);
            }
            if let Some(trace_path) = trace {
                if let Err(e) = std::fs::write(&trace_path, harness::trace_csv(&outcome.trace)) {
                    return fail(3, e);
                }
            }
            println!("checkpoint written to {}", out.display());
            println!("validation metrics:\n{}", outcome.report.table());
            ExitCode::SUCCESS
        }
        Command::Eval {
            ckpt,
            data: data_dir,
            split,
            out,
        } => {
            let split = match Split::parse(&split) {
                Some(s) => s,
                None => return fail(2, format!("unknown split {split:?}")),
            };
            let (cfg, vocab, store) = match harness::load_outcome(&ckpt) {
                Ok(t) => t,
                Err(e) => return fail(3, e),
            };
            let (records, manifest, _) = match load_dataset(&data_dir) {
                Ok(t) => t,
                Err(e) => return fail(3, e),
            };
            let report =
                match harness::evaluate(&store, &cfg, &vocab, &records, manifest.ids(split)) {
                    Ok(r) => r,
                    Err(e) => return fail(code_for(&e), e),
                };
            println!("{} split:\n{}", split.name(), report.table());
            if let Some(out) = out {
                if let Err(e) = std::fs::write(&out, report.to_csv()) {
                    return fail(3, e);
                }
            }
            ExitCode::SUCCESS
        }
        Command::Ablate {
            protocol,
            config,
            data: data_dir,
            out,
        } => {
            let protocol = match AblationProtocol::parse(&protocol) {
                Some(p) => p,
                None => return fail(2, format!("unknown protocol {protocol:?}")),
            };
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(2, e),
            };
            let (records, manifest, _) = match load_dataset(&data_dir) {
                Ok(t) => t,
                Err(e) => return fail(3, e),
            };
            let rows = match harness::ablate(protocol, &cfg, &records, &manifest) {
                Ok(r) => r,
                Err(e) => return fail(code_for(&e), e),
            };
            let csv = harness::ablation_csv(&rows);
            if let Err(e) = std::fs::write(&out, &csv) {
                return fail(3, e);
            }
            print!("{csv}");
            ExitCode::SUCCESS
        }
        Command::Gradcheck => {
            let report = mmfn::tensor::check::self_check();
            let mut ok = true;
            for (name, err) in &report {
                let pass = *err < 1e-4;
                ok &= pass;
                println!(
                    "{:<24} max rel err {err:.3e}  {}",
                    name,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(4)
            }
        }
        Command::Tokenize {
            vocab: vocab_path,
            data: data_dir,
            vocab_size,
            text: sample,
        } => {
            let vocab = if let Some(dir) = data_dir {
                let (records, manifest, _) = match load_dataset(&dir) {
                    Ok(t) => t,
                    Err(e) => return fail(3, e),
                };
                let vocab = match harness::build_vocab(&records, &manifest, vocab_size) {
                    Ok(v) => v,
                    Err(e) => return fail(3, e),
                };
                if let Err(e) = text::save_vocab(&vocab, &vocab_path) {
                    return fail(3, e);
                }
                println!(
                    "trained vocab with {} tokens ({} merges), wrote {}",
                    vocab.num_tokens(),
                    vocab.merges().len(),
                    vocab_path.display()
                );
                vocab
            } else {
                match text::load_vocab(&vocab_path) {
                    Ok(v) => v,
                    Err(e) => return fail(3, e),
                }
            };
            if let Some(sample) = sample {
                let seq = text::tokenize(&sample, &vocab);
                let back = match text::detokenize(&seq.ids, &vocab) {
                    Ok(s) => s,
                    Err(e) => return fail(3, e),
                };
                println!("{} tokens: {:?}", seq.len(), seq.ids);
                println!("round-trip {}", if back == sample { "ok" } else { "MISMATCH" });
            }
            ExitCode::SUCCESS
        }
    }
}
