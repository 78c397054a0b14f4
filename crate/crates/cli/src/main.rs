use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use meldae::data::load_manifest;
use meldae::eval::{evaluate, read_predictions, write_ledger, write_predictions, EvalConfig, EvalReport};
use meldae::gradcheck::{self, GradcheckConfig};
use meldae::losses::LocatorLossKind;
use meldae::model::load_checkpoint;
use meldae::synth::SynthConfig;
use meldae::train::{self, RunConfig};

#[derive(Parser)]
#[command(name = "meldae", version, about = "Micro-expression localization: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (npy payloads plus manifest.jsonl).
    GenerateData(GenerateArgs),
    /// Train a model; writes trainlog.csv and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint or a predictions file.
    Evaluate(EvaluateArgs),
    /// Train once per locator loss and compare the curves.
    AblateLosses(AblateArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the default run configuration.
    DefaultConfig,
}

#[derive(Args)]
struct GenerateArgs {
    /// Synthesis settings (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_clips: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    n_regions: Option<usize>,
    #[arg(long)]
    me_probability: Option<f64>,
    /// Shortest and longest micro-expression, e.g. `4,10`.
    #[arg(long, value_delimiter = ',')]
    me_duration_range: Option<Vec<usize>>,
    #[arg(long)]
    me_amplitude: Option<f64>,
    #[arg(long)]
    speaking_fraction: Option<f64>,
    #[arg(long)]
    speech_noise_amplitude: Option<f64>,
    #[arg(long)]
    base_noise_std: Option<f64>,
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run config: supplies the eval split, model shape and eval settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, requires = "config")]
    checkpoint: Option<PathBuf>,
    /// JSON-lines predictions, instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    /// Ground truth for `--predictions`; defaults to the config's eval split.
    #[arg(long, requires = "predictions")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-segment match ledger.
    #[arg(long)]
    ledger: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated: bal,bce,smooth_l1,soft_iou,mse,mae (or `all`).
    #[arg(long, default_value = "all")]
    kinds: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run config whose loss settings are checked.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the tiny-model check.
    #[arg(long)]
    no_model: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenerateData(a) => generate(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Evaluate(a) => evaluate_cmd(a)?,
        Command::AblateLosses(a) => ablate(a)?,
        Command::Gradcheck(a) => return gradcheck_cmd(a),
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml_string()),
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: &Path, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    fn set<T>(slot: &mut T, v: Option<T>) {
        if let Some(v) = v {
            *slot = v;
        }
    }
    set(&mut cfg.n_clips, a.n_clips);
    set(&mut cfg.frames, a.frames);
    set(&mut cfg.feature_dim, a.feature_dim);
    set(&mut cfg.n_regions, a.n_regions);
    set(&mut cfg.me_probability, a.me_probability);
    if let Some(v) = a.me_duration_range {
        let [lo, hi] = v[..] else { bail!("--me-duration-range takes two values, e.g. 4,10") };
        cfg.me_duration_range = [lo, hi];
    }
    set(&mut cfg.me_amplitude, a.me_amplitude);
    set(&mut cfg.speaking_fraction, a.speaking_fraction);
    set(&mut cfg.speech_noise_amplitude, a.speech_noise_amplitude);
    set(&mut cfg.base_noise_std, a.base_noise_std);
    set(&mut cfg.fps, a.fps);
    set(&mut cfg.seed, a.seed);
    let path = train::generate_corpus(&cfg, &a.out)?;
    let m = load_manifest(&path)?;
    let with_me = m.clips.iter().filter(|c| c.has_me).count();
    println!("wrote {} clips ({with_me} with a micro-expression) to {}", m.len(), path.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, a.out)?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml_string())?;
    let outcome = train::train(&cfg)?;
    println!("{}", outcome.final_eval);
    println!("best f1_dr {:.4} at epoch {}", outcome.best_f1_dr, outcome.best_epoch);
    println!("log: {}", outcome.trainlog_path().display());
    println!("checkpoints: {}, {}", outcome.best_checkpoint().display(), outcome.final_checkpoint().display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let cfg = a.config.as_deref().map(|p| load_config(p, None)).transpose()?;
    let eval_cfg = cfg.as_ref().map(|c| c.eval.clone()).unwrap_or_else(EvalConfig::default);
    let out =
        a.out.clone().or_else(|| cfg.as_ref().map(|c| c.output_dir.clone())).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out)?;

    let mut report: EvalReport = match (&a.checkpoint, &a.predictions) {
        (Some(ck), None) => {
            let cfg = cfg.as_ref().expect("clap enforces --config");
            let data = train::prepare_data(cfg)?;
            let model = load_checkpoint(ck, Some(&cfg.model))?;
            let preds = train::predict(&model, &data.eval)?;
            write_predictions(&out.join("predictions.jsonl"), &preds)?;
            evaluate(&preds, &data.eval_manifest, &eval_cfg)?
        }
        (None, Some(p)) => {
            let preds = read_predictions(p)?;
            let manifest = match (&a.manifest, &cfg) {
                (Some(m), _) => load_manifest(m)?,
                (None, Some(cfg)) => train::prepare_data(cfg)?.eval_manifest,
                (None, None) => bail!("--predictions needs --manifest or --config"),
            };
            evaluate(&preds, &manifest, &eval_cfg)?
        }
        _ => bail!("give either --checkpoint (with --config) or --predictions"),
    };

    if a.ledger {
        write_ledger(&out.join("ledger.jsonl"), &report.match_ledger)?;
    } else {
        report.match_ledger.clear();
    }
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("report.txt"), format!("{report}\n"))?;
    println!("{report}");
    Ok(())
}

fn parse_kinds(s: &str) -> Result<Vec<LocatorLossKind>> {
    if s.trim() == "all" {
        return Ok(LocatorLossKind::ALL.to_vec());
    }
    let kinds = s.split(',').map(|k| k.trim().parse::<LocatorLossKind>()).collect::<Result<Vec<_>, _>>()?;
    if kinds.is_empty() {
        bail!("no loss kinds given");
    }
    Ok(kinds)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.config, a.out)?;
    let kinds = parse_kinds(&a.kinds)?;
    let outcome = train::ablate_losses(&cfg, &kinds)?;
    println!("{:<10} {:>9} {:>9} {:>12}", "kind", "final", "best", "epochs_to_90");
    for r in &outcome.runs {
        let e90 = r.epochs_to_90.map(|e| e.to_string()).unwrap_or_else(|| "-".into());
        println!("{:<10} {:>9.4} {:>9.4} {:>12}", r.kind.name(), r.final_f1_dr, r.best_f1_dr, e90);
    }
    println!("table: {}", outcome.table_path.display());
    println!("plot: {}", outcome.plot_path.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<ExitCode> {
    let loss = match &a.config {
        Some(p) => RunConfig::load(p)?.loss,
        None => Default::default(),
    };
    let cfg = GradcheckConfig {
        instances: a.instances,
        seed: a.seed,
        loss,
        include_model: !a.no_model,
        ..Default::default()
    };
    let report = gradcheck::run(&cfg);
    print!("{report}");
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
