use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hat_core::commands::{
    cmd_evaluate, cmd_generate, cmd_heatmap, cmd_paramcount, cmd_train, preprocess, EvaluateArgs,
    GenerateArgs, HeatmapArgs, PreprocessArgs, TrainArgs,
};
use hat_core::eval::Metric;
use hat_core::text::dataset::PreprocessMode;
use hat_core::viz::{HeatmapFormat, DEFAULT_TOP_K};

#[derive(Parser)]
#[command(
    name = "hat",
    version,
    about = "Hierarchical attention transformer experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a JSONL corpus, building the vocabulary if none is given.
    Preprocess {
        input: PathBuf,
        #[arg(long, value_parser = parse::<PreprocessMode>)]
        mode: PreprocessMode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing checkpoints, a log and a manifest to OUT.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Vocabulary and generation config for ROUGE/BLEU selection.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        gen_config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode an encoded dataset, one output per line.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        trace_attention: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score candidates against references (one example per line).
    Evaluate {
        candidates: PathBuf,
        references: PathBuf,
        #[arg(long = "metric", value_parser = parse::<Metric>, required = true)]
        metrics: Vec<Metric>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render attention heatmaps from a trace file.
    Heatmap {
        trace: PathBuf,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
        #[arg(long, value_parser = parse::<HeatmapFormat>, default_value = "csv")]
        format: HeatmapFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the parameter breakdown and the hierarchical delta.
    Paramcount { model: PathBuf },
    /// Concatenate per-chunk translations into one line per document.
    Stitch {
        /// One translated chunk per line.
        chunks: PathBuf,
        /// Number of chunks in each document, one count per line.
        counts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Preprocess {
            input,
            mode,
            config,
            vocab,
            overrides,
            out,
        } => {
            let summary = preprocess(&PreprocessArgs {
                input,
                mode: Some(mode),
                config,
                overrides,
                vocab,
                out,
            })?;
            print_json(&summary);
        }
        Command::Train {
            model,
            config,
            train,
            valid,
            init_from,
            vocab,
            gen_config,
            overrides,
            out,
        } => {
            let summary = cmd_train(&TrainArgs {
                model_config: model,
                train_config: config,
                overrides,
                train_data: train,
                valid_data: valid,
                out,
                init_from,
                vocab,
                gen_config,
            })?;
            print_json(&summary);
        }
        Command::Generate {
            checkpoint,
            data,
            vocab,
            config,
            overrides,
            trace_attention,
            out,
        } => {
            let n = cmd_generate(&GenerateArgs {
                checkpoint,
                data,
                vocab,
                gen_config: config,
                overrides,
                out: out.clone(),
                trace_attention,
            })?;
            eprintln!("decoded {n} examples into {}", out.display());
        }
        Command::Evaluate {
            candidates,
            references,
            metrics,
            out,
        } => {
            let report = cmd_evaluate(&EvaluateArgs {
                candidates,
                references,
                metrics,
                out,
            })?;
            print_json(&report);
        }
        Command::Heatmap {
            trace,
            layer,
            top_k,
            format,
            out,
        } => {
            for path in cmd_heatmap(&HeatmapArgs {
                trace,
                layer,
                top_k,
                format,
                out_prefix: out,
            })? {
                println!("{}", path.display());
            }
        }
        Command::Paramcount { model } => print_json(&cmd_paramcount(&model)?),
        Command::Stitch {
            chunks,
            counts,
            out,
        } => {
            let chunks = std::fs::read_to_string(&chunks)?;
            let counts = std::fs::read_to_string(&counts)?;
            let stitched = hat_core::commands::stitch(chunks.lines(), counts.lines())?;
            std::fs::write(out, stitched)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
