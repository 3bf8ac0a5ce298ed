//! `fer`: train, compare and inspect runs from the command line.
//!
//! Every command is deterministic; there is no non-deterministic mode to opt
//! into. Errors are printed to stderr and the process exits with status 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fer_core::data::{DatasetManifest, NoiseSpec, Schema};
use fer_core::harness::{self, ExperimentConfig, OUTPUT_ROOT_ENV};
use fer_core::{gradcheck, make_blobs, Dataset, Delimiter, PredictionHistory};

#[derive(Parser)]
#[command(name = "fer", version, about = "Flip-error reduction training lab")]
struct Cli {
    /// Accepted for scripts; runs are always deterministic.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write its artifacts.
    Train {
        config: PathBuf,
        /// Output directory (overrides the config and the output-root variable).
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Run several configs on the same data and seeds and print paired deltas.
    Compare {
        #[arg(required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        /// Also write the comparison table here as CSV.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Flip errors of a saved prediction history.
    FlipReport {
        history: PathBuf,
        /// Epoch to report on (defaults to the last one).
        #[arg(long)]
        at_epoch: Option<usize>,
    },
    /// Corrupt a fraction of a delimited dataset's labels.
    NoiseInject {
        dataset: PathBuf,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        seed: u64,
        /// Draw replacement labels from the other classes only.
        #[arg(long)]
        exclude_true: bool,
        #[arg(long, value_enum, default_value_t = Sep::Comma)]
        delimiter: Sep,
        #[arg(long, default_value_t = -1, allow_hyphen_values = true)]
        label_column: isize,
        #[arg(long)]
        header: bool,
        /// Defaults to `<dataset>.noisy`; a `.manifest.json` is written beside it.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Check every analytic gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print every case, not just the summary.
        #[arg(long, short)]
        verbose: bool,
    },
    /// Write a Gaussian-blobs dataset as a delimited file.
    MakeBlobs {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 2.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Sep::Comma)]
        delimiter: Sep,
        #[arg(long, short)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Sep {
    Comma,
    Whitespace,
}

impl From<Sep> for Delimiter {
    fn from(s: Sep) -> Self {
        match s {
            Sep::Comma => Delimiter::Comma,
            Sep::Whitespace => Delimiter::Whitespace,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("invalid config {}", path.display()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, output } => {
            let mut cfg = load_config(&config)?;
            if output.is_some() {
                cfg.output_dir = output;
            }
            let result = harness::run_experiment(&cfg)?;
            for run in &result.runs {
                println!("seed {} final {}", run.seed, run.final_report.summary_line());
                println!("seed {} best   {}", run.seed, run.best_report.summary_line());
            }
            print!("{}", result.summary_csv());
            match cfg.resolved_output_dir() {
                Some(dir) => println!("artifacts written to {}", dir.display()),
                None => println!("no output directory configured (set output_dir, --output or {OUTPUT_ROOT_ENV})"),
            }
        }
        Command::Compare { configs, output } => {
            let cfgs = configs.iter().map(|p| load_config(p)).collect::<Result<Vec<_>>>()?;
            let table = harness::compare(&cfgs)?;
            let csv = table.to_csv();
            print!("{csv}");
            if let Some(path) = output {
                std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::FlipReport { history, at_epoch } => {
            let h = PredictionHistory::load(&history)?;
            if h.epoch_count() == 0 {
                bail!("{} holds no epochs", history.display());
            }
            let epoch = at_epoch.unwrap_or(h.epoch_count() - 1);
            println!("{}", h.flip_report(epoch)?.summary_line());
        }
        Command::NoiseInject {
            dataset,
            rate,
            seed,
            exclude_true,
            delimiter,
            label_column,
            header,
            output,
        } => {
            let schema = Schema {
                delimiter: delimiter.into(),
                label_column,
                feature_columns: None,
                header,
            };
            let ds = Dataset::load_delimited(&dataset, &schema)?;
            let noisy = ds.inject_noise(&NoiseSpec {
                rate,
                seed,
                exclude_true,
            })?;
            let out = output.unwrap_or_else(|| {
                let mut p = dataset.clone().into_os_string();
                p.push(".noisy");
                p.into()
            });
            noisy.write_delimited(&out, delimiter.into())?;
            let manifest: DatasetManifest = noisy.manifest(&dataset.display().to_string(), None);
            let mut mpath = out.clone().into_os_string();
            mpath.push(".manifest.json");
            std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
                .with_context(|| format!("writing {}", Path::new(&mpath).display()))?;
            println!(
                "relabelled {} of {} rows -> {}",
                manifest.noisy_indices.len(),
                manifest.n,
                out.display()
            );
        }
        Command::Gradcheck { seed, verbose } => {
            let report = gradcheck::run_suite(seed)?;
            if verbose {
                for c in &report.cases {
                    println!("{:<48} {:.3e}", c.name, c.max_error);
                }
            }
            println!(
                "{} cases, max relative error {:.3e} (tolerance {:.0e})",
                report.cases.len(),
                report.max_error(),
                gradcheck::GRADCHECK_TOLERANCE
            );
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
        Command::MakeBlobs {
            classes,
            per_class,
            dim,
            separation,
            seed,
            delimiter,
            output,
        } => {
            let ds = make_blobs(classes, per_class, dim, separation, seed)?;
            ds.write_delimited(&output, delimiter.into())?;
            println!("wrote {} rows to {}", ds.len(), output.display());
        }
    }
    Ok(())
}
