//! `affattn`: train, compare and analyze attention variants.

use std::path::PathBuf;
use std::process::ExitCode;

use affattn::diagnostics::{EntropyMode, WeightSource};
use affattn::experiment::{
    cmd_analyze, cmd_compare, cmd_gradcheck, cmd_train, output_dir_or_env, params_table,
    AnalyzeOptions, ExperimentConfig,
};
use affattn::numerics::GradCheckOptions;
use affattn::Error;
use clap::{Parser, Subcommand, ValueEnum};

/// Experiments with affine-scaled, sink, off-by-one and gated attention.
///
/// Output directories can be redirected with the AFFATTN_OUT environment
/// variable.
#[derive(Parser)]
#[command(name = "affattn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of this config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train several configs that differ only in attention settings and
    /// merge their loss, gradient-norm and score series.
    Compare {
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
    },
    /// Attention diagnostics of a checkpoint on held-out sequences.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take the corpus path and holdout split from this experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus file (overrides the config's).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs/analysis")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_sequences: usize,
        /// Defaults to the model's maximum sequence length.
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only analyze these layers (comma separated).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long, default_value_t = 30)]
        block: usize,
        #[arg(long, value_enum, default_value_t = EntropyArg::Distribution)]
        entropy: EntropyArg,
        /// Weights for the heatmap export; effective for affine by default.
        #[arg(long, value_enum)]
        heatmap: Option<SourceArg>,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Finite-difference gradient checks for every attention variant.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Parameter counts and overhead over baseline per variant.
    Params,
}

#[derive(Clone, Copy, ValueEnum)]
enum EntropyArg {
    Distribution,
    ClippedEffective,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Raw,
    Effective,
}

fn run(cli: Cli) -> affattn::Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let config = ExperimentConfig::load(&config)?;
            let outcome = cmd_train(&config, resume.as_deref())?;
            let last = outcome.records.last();
            println!(
                "trained {} steps; final loss {}; outputs in {}",
                last.map_or(0, |r| r.step),
                last.map_or(f64::NAN, |r| r.loss),
                outcome.output_dir.display()
            );
        }
        Command::Compare { configs, out } => {
            let configs = configs
                .iter()
                .map(|p| ExperimentConfig::load(p))
                .collect::<affattn::Result<Vec<_>>>()?;
            let summary = cmd_compare(&configs, &output_dir_or_env(&out))?;
            println!("method,initial_loss,final_loss,grad_norm_cv,spikes_k6,spikes_k9");
            for m in &summary.methods {
                println!(
                    "{},{},{},{},{},{}",
                    m.method,
                    m.initial_loss,
                    m.final_loss,
                    m.stability.cv.map_or("undefined".to_string(), |c| c.to_string()),
                    m.stability.spikes.k6.count,
                    m.stability.spikes.k9.count
                );
            }
            println!("lowest final loss: {}", summary.lowest_final_loss);
        }
        Command::Analyze {
            checkpoint,
            config,
            data,
            out,
            n_sequences,
            seq_len,
            seed,
            layers,
            block,
            entropy,
            heatmap,
            bins,
        } => {
            let mut opts = AnalyzeOptions {
                out_dir: output_dir_or_env(&out),
                n_sequences,
                seq_len,
                seed,
                layers,
                block,
                entropy_mode: match entropy {
                    EntropyArg::Distribution => EntropyMode::Distribution,
                    EntropyArg::ClippedEffective => EntropyMode::ClippedEffective,
                },
                heatmap_source: heatmap.map(|h| match h {
                    SourceArg::Raw => WeightSource::Raw,
                    SourceArg::Effective => WeightSource::Effective,
                }),
                bins,
                ..AnalyzeOptions::default()
            };
            if let Some(path) = config {
                let c = ExperimentConfig::load(&path)?;
                opts.data_path = c.data.path;
                opts.max_bytes = c.data.max_bytes;
                opts.holdout_fraction = c.data.holdout_fraction;
            }
            if let Some(d) = data {
                opts.data_path = d;
            }
            let summary = cmd_analyze(&checkpoint, &opts)?;
            println!(
                "{}: qkt_mean {}, per-query mass mean {} median {}; outputs in {}",
                summary.method,
                summary.qkt_mean,
                summary.per_query_mass_mean,
                summary.per_query_mass_median,
                opts.out_dir.display()
            );
        }
        Command::Gradcheck { step, tol, json } => {
            let rows = cmd_gradcheck(GradCheckOptions::new(step, tol))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                println!("{:<18} {:<8} {:>12} {:>12} {:>8}  result", "variant", "group", "max_rel", "max_abs", "checked");
                for r in &rows {
                    println!(
                        "{:<18} {:<8} {:>12.3e} {:>12.3e} {:>8}  {}",
                        r.variant,
                        r.group,
                        r.max_rel_error,
                        r.max_abs_error,
                        r.checked,
                        if r.passed { "ok" } else { "FAIL" }
                    );
                }
            }
            if let Some(bad) = rows.iter().find(|r| !r.passed) {
                return Err(Error::Evaluation(format!(
                    "gradient check failed for {} / {}",
                    bad.variant, bad.group
                )));
            }
        }
        Command::Params => print!("{}", params_table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
