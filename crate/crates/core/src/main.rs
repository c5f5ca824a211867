use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use occmotion::io::write_json;
use occmotion::pipeline::{
    evaluate_predictions, evaluate_warps, generate, load_config, load_document, predict_sequence, read_prediction_set,
    read_sequence, read_warps, register_sequence, write_prediction_set, write_registration, AnimationSpec, Config,
    Method, PipelineError,
};
use occmotion::registration::EnergyWeights;

const EXIT_CODES: &str = "Exit codes: 0 success, 1 usage, 2 input/output or format error, 3 solver failure.";

/// Occluded node motion prediction and warp-field registration on synthetic
/// depth sequences.
#[derive(Parser)]
#[command(name = "occmotion", version, after_help = EXIT_CODES)]
struct Cli {
    /// TOML or JSON file overriding any default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sequence directory.
    Generate {
        /// Animation spec (TOML or JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Predict per-frame node motion.
    Predict {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Prediction set to pass through (external) or refine (arap-refined).
        #[arg(long)]
        pred_file: Option<PathBuf>,
        /// `.json` bundle, otherwise a directory of per-frame CSV files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Track the canonical surface through the sequence.
    Register {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Energy weights (TOML or JSON); overrides the config's weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions or registered warp fields against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "input")]
struct EvaluateInput {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    warp: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    seq: PathBuf,
    #[command(flatten)]
    input: EvaluateInput,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Rigid,
    Arap,
    ArapRefined,
    External,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Rigid => Method::Rigid,
            MethodArg::Arap => Method::Arap,
            MethodArg::ArapRefined => Method::ArapRefined,
            MethodArg::External => Method::External,
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut config: Config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Generate { spec, out, seed } => {
            let spec: AnimationSpec = load_document(&spec)?;
            generate(&spec, &config, seed, &out)?;
        }
        Command::Predict {
            seq,
            method,
            pred_file,
            out,
        } => {
            let method = Method::from(method);
            if method == Method::External && pred_file.is_none() {
                return Err(PipelineError::Usage("--method external needs --pred-file".into()));
            }
            let (seq, _) = read_sequence(&seq)?;
            let base = pred_file
                .map(|p| read_prediction_set(&p, seq.node_count(), seq.frames.len(), config.arap.sigma_min))
                .transpose()?;
            let preds = predict_sequence(&seq, method, base.as_deref(), &config)?;
            write_prediction_set(&out, &preds)?;
        }
        Command::Register {
            seq,
            pred,
            weights,
            out,
        } => {
            if let Some(w) = weights {
                config.weights = load_document::<EnergyWeights>(&w)?;
            }
            let (seq, _) = read_sequence(&seq)?;
            let preds = pred
                .map(|p| read_prediction_set(&p, seq.node_count(), seq.frames.len(), config.arap.sigma_min))
                .transpose()?;
            let run = register_sequence(&seq, preds.as_deref(), &config)?;
            write_registration(&out, &run)?;
        }
        Command::Evaluate(args) => {
            let (seq, _) = read_sequence(&args.seq)?;
            let report = match (args.input.pred, args.input.warp) {
                (Some(p), _) => {
                    let preds = read_prediction_set(&p, seq.node_count(), seq.frames.len(), config.arap.sigma_min)?;
                    evaluate_predictions(&seq, &preds, &config)?
                }
                (None, Some(w)) => {
                    let fields = read_warps(&w, seq.pyramid.level(0), seq.frames.len())?;
                    evaluate_warps(&seq, &fields, &config)?
                }
                (None, None) => return Err(PipelineError::Usage("need --pred or --warp".into())),
            };
            create_parent(&args.out)?;
            write_json(&args.out, &report)?;
        }
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<(), PipelineError> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| occmotion::io::IoError::io(dir, e).into()),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 1 {
                eprintln!("\n{EXIT_CODES}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
