use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cmc_core::bench::{bench_table, LayerShape, Strategy};
use cmc_core::config::ExperimentConfig;
use cmc_core::Error;

mod run;

#[derive(Parser)]
#[command(name = "cmc", version, about = "Continual restoration experiments with CMC layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Four denoising tasks, sigma 10/20/30/40.
    Noise,
    /// Derain, denoise, deblock, deblur.
    Restoration,
}

#[derive(Subcommand)]
enum Command {
    /// Train a task sequence, writing archives and reports to the output directory.
    Run(run::RunArgs),
    /// Print the cost comparison table for growing one convolution layer.
    Bench {
        /// Analytic shape as k_in,k_out,n,H,W.
        #[arg(long, default_value = "64,64,3,1000,1000", value_parser = parse_shape)]
        shape: LayerShape,
        /// Shape used for wall-clock timing.
        #[arg(long, default_value = "64,64,3,64,64", value_parser = parse_shape)]
        timed_shape: LayerShape,
        /// Families (plain, type1, type2, cmc) or single rows (type1:6, cmc:20).
        #[arg(long, default_value = "plain,type1,type2,cmc", value_parser = parse_strategies)]
        strategies: StrategyList,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Skip timing and print analytic columns only.
        #[arg(long)]
        no_timing: bool,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a complete example config.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Noise)]
        preset: Preset,
    },
}

#[derive(Clone)]
struct StrategyList(Vec<Strategy>);

fn parse_shape(s: &str) -> Result<LayerShape, String> {
    LayerShape::parse(s).map_err(|e| e.to_string())
}

fn parse_strategies(s: &str) -> Result<StrategyList, String> {
    Strategy::parse_list(s).map(StrategyList).map_err(|e| e.to_string())
}

/// Prints a one-line JSON error on stderr.
fn report_error(e: &Error) {
    let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
    eprintln!("{body}");
}

fn bench(
    shape: LayerShape,
    timed: LayerShape,
    strategies: &[Strategy],
    repeats: usize,
    no_timing: bool,
    format: Format,
    out: Option<PathBuf>,
) -> cmc_core::Result<()> {
    let timed = (!no_timing).then_some((timed, repeats));
    let report = bench_table(shape, timed, strategies)?;
    let text = match format {
        Format::Csv => report.to_csv()?,
        Format::Markdown => report.to_markdown(),
    };
    match out {
        Some(path) => cmc_core::report::write_file(&path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run::run(args),
        Command::Bench {
            shape,
            timed_shape,
            strategies,
            repeats,
            no_timing,
            format,
            out,
        } => bench(shape, timed_shape, &strategies.0, repeats, no_timing, format, out),
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Noise => ExperimentConfig::noise_sequence(),
                Preset::Restoration => ExperimentConfig::restoration_sequence(),
            };
            cfg.to_toml().map(|t| print!("{t}"))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}
