use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cpga::checkpoint::Checkpoint;
use cpga::datasets::make_domains;
use cpga::experiments::{self, AblationFile, PrototypeView};
use cpga::training::{self, MetricsLog, RunConfig};
use cpga::Result;

#[derive(Parser)]
#[command(name = "cpga", version, about = "Source-free domain adaptation with generated class prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain on the source domain, generate prototypes, adapt to the target.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Directory for metrics, pseudo labels and checkpoints.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Run a table of loss ablations.
    Ablate {
        #[arg(long)]
        spec: PathBuf,
        /// Write the table here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy over a grid of trade-off weights.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        lambda: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        eta: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weighted against unweighted alignment under corrupted pseudo labels.
    Noise {
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render loss, accuracy and prototype plots from a metrics log.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Generator checkpoint; defaults to generator.json next to the log.
        #[arg(long)]
        generator: Option<PathBuf>,
    },
}

fn load_run(config: Option<&Path>) -> Result<RunConfig> {
    match config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => experiments::write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (source, target) = make_domains(&cfg.benchmark)?;
    let output = training::run_pipeline_with_log(&source, &target, &cfg.model, &cfg.train, MetricsLog::echoing())?;
    std::fs::create_dir_all(out)?;
    output.log.write_csv(&out.join("metrics.csv"))?;
    training::write_summary(&out.join("summary.csv"), &output)?;
    if let Some(pseudo) = &output.adapted.pseudo {
        pseudo.write_csv(&out.join("pseudo_labels.csv"))?;
    }
    let dims = training::dims_for(&source, &cfg.model);
    output.save_checkpoints(out, &dims, cfg.train.seed)?;
    println!(
        "source accuracy {:.4}, target before {:.4}, target after {:.4}",
        output.source_accuracy, output.source_only_target_accuracy, output.target_accuracy
    );
    Ok(())
}

fn plot(log: &Path, out: &Path, generator: Option<&Path>) -> Result<()> {
    let metrics = MetricsLog::from_csv(&std::fs::read_to_string(log)?)?;
    let sibling = log.with_file_name("generator.json");
    let path = generator.map(Path::to_path_buf).or_else(|| sibling.exists().then_some(sibling));
    match path {
        Some(p) => {
            let g = Checkpoint::load(&p)?.to_generator()?;
            experiments::emit_plots(&metrics, out, PrototypeView::Generator(&g, 50))
        }
        None => experiments::emit_plots(&metrics, out, PrototypeView::Distances),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => run(&config, &out),
        Command::Ablate { spec, out } => {
            let file = AblationFile::from_toml(&std::fs::read_to_string(&spec)?)?;
            let results = experiments::run_ablation(&file.ablation, &file.model, &file.train)?;
            for r in &results {
                for (seed, err) in &r.failures {
                    eprintln!("{} seed {seed} failed: {err}", r.name);
                }
            }
            emit(&experiments::ablation_csv(&results), out.as_deref())
        }
        Command::Sweep {
            lambda,
            eta,
            config,
            seeds,
            out,
        } => {
            let cfg = load_run(config.as_deref())?;
            let table = experiments::run_sensitivity(&cfg, &lambda, &eta, &seeds)?;
            emit(&table.to_csv(), out.as_deref())
        }
        Command::Noise {
            rates,
            config,
            seeds,
            out,
        } => {
            let cfg = load_run(config.as_deref())?;
            let points = experiments::run_noise_robustness(&cfg, &rates, &seeds)?;
            emit(&experiments::noise_csv(&points), out.as_deref())
        }
        Command::Plot { log, out, generator } => plot(&log, &out, generator.as_deref()),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
