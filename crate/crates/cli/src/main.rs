use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graphcorr::config::ExperimentConfig;
use graphcorr::experiment;
use graphcorr::synth::{self, SynthSpec};
use graphcorr::{Error, ErrorClass};

/// GraphCorr: lag-aware dynamic connectivity features for graph classifiers.
#[derive(Parser, Debug)]
#[command(name = "graphcorr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON configuration file (a synthetic spec for `synth`).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Synth(Common),
    /// Cross-validate the configured model (and its static-FC baseline).
    TrainEval(Common),
    /// Saliency reports and the logistic fit for a trained checkpoint.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated subject ids; all subjects when omitted.
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<String>,
    },
    /// Full model against each single-component ablation.
    Ablate(Common),
}

fn load_config(common: &Common) -> graphcorr::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> graphcorr::Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let mut spec = SynthSpec::load(&c.config)?;
            if let Some(seed) = c.seed {
                spec.seed = seed;
            }
            let out = c.out.unwrap_or_else(|| c.config.with_extension(""));
            let manifest = synth::generate(&spec, &out)?;
            println!("wrote {} subjects; manifest {}", spec.subject_count(), manifest.display());
        }
        Command::TrainEval(c) => {
            let cfg = load_config(&c)?;
            let summary = experiment::train_eval(&cfg, c.out.as_deref())?;
            print_summary(&summary);
        }
        Command::Ablate(c) => {
            let cfg = load_config(&c)?;
            let summary = experiment::ablate(&cfg, c.out.as_deref())?;
            print_summary(&summary);
        }
        Command::Explain {
            common,
            checkpoint,
            subjects,
        } => {
            let cfg = load_config(&common)?;
            let summary = experiment::explain(&cfg, &checkpoint, &subjects, common.out.as_deref())?;
            for s in &summary.subjects {
                match s.w_star {
                    Some(w) => println!("{}: predicted {}, most salient window {w}", s.subject_id, s.predicted_class),
                    None => println!("{}: predicted {}", s.subject_id, s.predicted_class),
                }
            }
        }
    }
    Ok(())
}

fn print_summary(summary: &experiment::RunSummary) {
    for v in &summary.variants {
        println!("{}: accuracy {}, roc auc {}", v.variant, v.accuracy, v.roc_auc);
    }
    for t in &summary.tests {
        if let Some(p) = t.p_two_sided {
            println!("wilcoxon {} vs {} ({}): p = {p:.5}", t.variant, t.reference, t.metric);
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err.class() {
        ErrorClass::Configuration => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
