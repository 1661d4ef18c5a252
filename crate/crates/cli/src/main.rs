//! `skillseq` command-line front end.
//!
//! Every invocation ends with one JSON line: on stdout for success
//! (`{"status":"ok",...}`), on stderr for failure
//! (`{"status":"error","kind":"usage"|"runtime",...}`). Exit codes: 0 ok,
//! 1 runtime failure, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "skillseq", version, about = "Skill assessment from tool-motion sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that resolve a run configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Worker threads for per-fold work; 1 runs serially.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (manifest plus one CSV per trial).
    Synth {
        /// Generator settings as `key = value` lines.
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse a manifest and every trial, and summarize it.
    IngestCheck {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the denoising autoencoder on every trial of a manifest.
    TrainDae {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Attach a head to a trained autoencoder and train it.
    TrainClassifier {
        #[arg(long)]
        manifest: PathBuf,
        /// Autoencoder bundle from `train-dae`.
        #[arg(long)]
        dae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Cross-validate and persist every artifact of the run.
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// stratified<k>, loso or louo.
        #[arg(long)]
        scheme: Option<String>,
        /// classify or regress.
        #[arg(long)]
        mode: Option<String>,
        /// Run directory; defaults to `runs/<content address>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Predict every trial of a manifest with a trained bundle.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output CSV; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Class activation maps (CSV) and overlays (SVG).
    Cam {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Only this trial, as `subject/index`.
        #[arg(long)]
        trial: Option<String>,
        /// Target class; default is the true class, else the predicted one.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Trust spectrum, net trust score and trust densities.
    Trust {
        /// Prediction CSV.
        #[arg(long, conflicts_with = "run", required_unless_present = "run")]
        predictions: Option<PathBuf>,
        /// Run directory from `evaluate`.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<String>,
        #[arg(long)]
        beta: Option<String>,
        /// Kernel bandwidth or `auto`.
        #[arg(long)]
        bandwidth: Option<String>,
        /// Defaults to the run directory, else the current one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mask with out-of-fold maps, retrain on the same folds, compare.
    ValidateCam {
        #[arg(long)]
        run: PathBuf,
        /// Dataset of the run; default is the manifest it recorded.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients of every layer.
    Gradcheck {
        /// Random configurations per layer or loss kind.
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let first = e.to_string().lines().next().unwrap_or("").to_string();
            return commands::Failure::Usage(first).report();
        }
    };
    match run(cli.command) {
        Ok(done) => {
            println!("{}", done.json());
            ExitCode::SUCCESS
        }
        Err(f) => f.report(),
    }
}

fn run(command: Command) -> Result<commands::Done, commands::Failure> {
    use commands as c;
    match command {
        Command::Synth { spec, out, seed } => c::synth(spec.as_deref(), &out, seed),
        Command::IngestCheck { manifest, cfg } => c::ingest_check(&manifest, &cfg),
        Command::TrainDae { manifest, out, cfg } => c::train_dae(&manifest, &out, &cfg),
        Command::TrainClassifier {
            manifest,
            dae,
            out,
            mode,
            cfg,
        } => c::train_classifier(&manifest, &dae, &out, mode, &cfg),
        Command::Evaluate {
            manifest,
            scheme,
            mode,
            out,
            cfg,
        } => c::evaluate(manifest, scheme, mode, out, &cfg),
        Command::Predict {
            model,
            manifest,
            out,
            cfg,
        } => c::predict(&model, &manifest, out.as_deref(), &cfg),
        Command::Cam {
            model,
            manifest,
            trial,
            class,
            out,
            cfg,
        } => c::cam(&model, &manifest, trial.as_deref(), class, &out, &cfg),
        Command::Trust {
            predictions,
            run,
            alpha,
            beta,
            bandwidth,
            out,
        } => c::trust(predictions.as_deref(), run.as_deref(), [alpha, beta, bandwidth], out),
        Command::ValidateCam { run, manifest, jobs } => c::validate_cam(&run, manifest.as_deref(), jobs),
        Command::Gradcheck { configs, seed } => c::gradcheck(configs, seed),
    }
}
