use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use stc_core::analysis::{
    count_params_flops, gradient_flow_csv, paramtrace, paramtrace_csv, shuffle_probe, simulate_lif, simulate_stc,
    unroll_experiment, FlowModel, NeuronSite,
};
use stc_core::data::{save_npy, NpyDtype};
use stc_core::prednet::{load_checkpoint, NetworkParams};
use stc_core::train::{evaluate, RunArtifacts, Trainer};
use stc_core::{Error, RunConfig, SurrogateConfig};

/// Exit status for a configuration problem.
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_IO: u8 = 4;

const OUTPUT_ROOT_ENV: &str = "STC_OUTPUT_ROOT";
const RESOLVED: &str = "config.resolved.toml";

#[derive(Parser)]
#[command(name = "stc", version, about = "Spiking frame prediction with spatio-temporal circuits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Analyses and oracle checks.
    #[command(subcommand)]
    Analyze(Analysis),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data and rollout settings; defaults to the config stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of predicted frames (may exceed the training value).
    #[arg(long)]
    t_out: Option<usize>,
    /// Also write the predicted frames as `predictions.npy`.
    #[arg(long)]
    dump_frames: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Lif,
    Stc,
}

#[derive(Subcommand)]
enum Analysis {
    /// Closed-form T-step unroll vs step simulation.
    Unroll {
        #[arg(long, value_enum, default_value = "stc")]
        model: ModelArg,
        #[arg(long = "T", default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        neurons: usize,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Temporal gradient product with an autodiff cross-check.
    Gradflow {
        #[arg(long, value_enum, default_value = "lif")]
        model: ModelArg,
        #[arg(long = "T", default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Constant input current.
        #[arg(long, default_value_t = -1e8, allow_hyphen_values = true)]
        input: f64,
        /// Constant temporal factor for the STC model.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        beta: f64,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Parameter and multiply-accumulate accounting.
    Cost {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Prediction error with ordered vs shuffled input frames.
    Shuffle {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Per-step β, γ and α of one neuron during inference.
    Paramtrace {
        /// Trained parameters; without it the network is initialised from the config seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[arg(long, default_value_t = 0)]
        y: usize,
        #[arg(long, default_value_t = 0)]
        x: usize,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_default()
}

fn resolve_dir(explicit: Option<PathBuf>, fallback: &Path) -> PathBuf {
    let dir = explicit.unwrap_or_else(|| fallback.to_path_buf());
    if dir.is_absolute() {
        dir
    } else {
        output_root().join(dir)
    }
}

fn prepare_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", dir.display()))
}

fn write(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text)
        .map_err(Error::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Parameters and run config from a checkpoint, optionally replacing the
/// data/rollout sections from `override_cfg`.
fn load_trained(checkpoint: &Path, override_cfg: Option<&Path>) -> anyhow::Result<(NetworkParams, RunConfig, PathBuf)> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let stored = RunConfig::from_toml_str(&ckpt.meta).context("checkpoint carries an invalid config")?;
    let (cfg, base) = match override_cfg {
        Some(p) => {
            let mut c = RunConfig::load(p)?;
            if c.network_config() != stored.network_config() {
                return Err(Error::Config(format!(
                    "{} describes a different architecture than the checkpoint",
                    p.display()
                ))
                .into());
            }
            c.seed = stored.seed;
            (c, base_dir(p))
        }
        None => (stored, base_dir(checkpoint)),
    };
    let net = NetworkParams::from_tensors(cfg.network_config(), ckpt.tensors)?;
    Ok((net, cfg, base))
}

fn cmd_train(config: &Path, output_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    let base = base_dir(config);
    if let Some(npy) = cfg.data.npy.as_mut() {
        // Pin data paths so the stored config works from any directory.
        for p in [&mut npy.train, &mut npy.test] {
            if p.is_relative() {
                *p = std::path::absolute(base.join(&*p)).map_err(Error::from)?;
            }
        }
    }
    let dir = resolve_dir(output_dir, &cfg.output_dir);
    prepare_dir(&dir)?;
    let resolved = cfg.to_toml();
    write(&dir, RESOLVED, &resolved)?;
    let (train, test) = cfg.load_data(&base)?;
    let net = NetworkParams::init(cfg.network_config(), cfg.seed)?;
    eprintln!(
        "training {} ({} parameters) on {} sequences for {} epochs",
        cfg.model.kind,
        net.param_count(),
        train.shape()[0],
        cfg.optim.epochs
    );
    let mut artifacts = RunArtifacts::create(&dir, resolved)?;
    let mut trainer = Trainer::new(net, cfg.train_config())?;
    let summary = trainer.fit(&train, &test, &mut artifacts)?;
    println!(
        "best test mse {} at epoch {}; artifacts in {}",
        summary.best_test_mse,
        summary.best_epoch,
        dir.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (net, mut cfg, base) = load_trained(&args.checkpoint, args.config.as_deref())?;
    if let Some(t) = args.t_out {
        cfg.data.t_out = t;
        if let Some(spec) = cfg.data.synthetic.as_mut() {
            spec.t_total = spec.t_total.max(cfg.data.t_in + t);
        }
        cfg.validate()?;
    }
    let fallback = base_dir(&args.checkpoint).join("eval");
    let dir = resolve_dir(args.output_dir, &fallback);
    prepare_dir(&dir)?;
    write(&dir, RESOLVED, &cfg.to_toml())?;
    let (_, test) = cfg.load_data(&base)?;
    let report = evaluate(&net, &test, &cfg.plan(), cfg.optim.eval_batch)?;
    let mut csv = String::from("frame,mse,mae,ssim,psnr\n");
    for (i, f) in report.per_frame.iter().enumerate() {
        csv.push_str(&format!("Frame{},{},{},{},{}\n", i + 1, f.mse, f.mae, f.ssim, f.psnr));
    }
    let m = report.metrics;
    csv.push_str(&format!("all,{},{},{},{}\n", m.mse, m.mae, m.ssim, m.psnr));
    write(&dir, "eval_metrics.csv", &csv)?;
    if args.dump_frames {
        let path = dir.join("predictions.npy");
        save_npy(&path, &report.predictions, NpyDtype::F32)?;
    }
    println!("mse {} mae {} ssim {} psnr {}", m.mse, m.mae, m.ssim, m.psnr);
    Ok(())
}

fn analysis_dir(explicit: Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    let dir = resolve_dir(explicit, &Path::new("analysis").join(name));
    prepare_dir(&dir)?;
    Ok(dir)
}

fn cmd_analyze(a: Analysis) -> anyhow::Result<()> {
    match a {
        Analysis::Unroll {
            model,
            steps,
            seed,
            neurons,
            output_dir,
        } => {
            let dir = analysis_dir(output_dir, "unroll")?;
            let (flow, name) = match model {
                ModelArg::Lif => (FlowModel::Lif { alpha: 0.5 }, "lif"),
                ModelArg::Stc => (FlowModel::Stc, "stc"),
            };
            write(
                &dir,
                "args.resolved.toml",
                &format!("analysis = \"unroll\"\nmodel = \"{name}\"\nT = {steps}\nseed = {seed}\nneurons = {neurons}\n"),
            )?;
            let report = unroll_experiment(flow, steps, seed, neurons)?;
            write(&dir, "unroll.csv", &report.to_csv())?;
            println!("max |closed - simulated| = {:e}", report.max_abs_error);
        }
        Analysis::Gradflow {
            model,
            steps,
            alpha,
            input,
            beta,
            output_dir,
        } => {
            let dir = analysis_dir(output_dir, "gradflow")?;
            let x = vec![input; steps];
            let (trace, flow, name) = match model {
                ModelArg::Lif => (simulate_lif(&x, alpha, 1.0, 0.0)?, FlowModel::Lif { alpha }, "lif"),
                ModelArg::Stc => (
                    simulate_stc(&x, &vec![beta; steps], &vec![0.0; steps], 1.0, 0.0)?,
                    FlowModel::Stc,
                    "stc",
                ),
            };
            write(
                &dir,
                "args.resolved.toml",
                &format!(
                    "analysis = \"gradflow\"\nmodel = \"{name}\"\nT = {steps}\nalpha = {alpha:?}\ninput = {input:?}\nbeta = {beta:?}\n"
                ),
            )?;
            let csv = gradient_flow_csv(&trace, 1.0, SurrogateConfig::default(), flow)?;
            let last = csv.lines().last().unwrap_or_default().to_string();
            write(&dir, "gradflow.csv", &csv)?;
            println!("final row: {last}");
        }
        Analysis::Cost { config, output_dir } => {
            let cfg = RunConfig::load(&config)?;
            let dir = analysis_dir(output_dir, "cost")?;
            write(&dir, RESOLVED, &cfg.to_toml())?;
            let net = NetworkParams::init(cfg.network_config(), cfg.seed)?;
            let report = count_params_flops(&net, &cfg.plan())?;
            write(&dir, "cost.csv", &report.to_csv())?;
            println!(
                "params {} ({:.3}M); MACs per rollout {} ({:.3}G); circuit MAC share {:.2}%",
                report.total_params(),
                report.total_params() as f64 / 1e6,
                report.total_macs(),
                report.total_macs() as f64 / 1e9,
                100.0 * report.circuit_mac_increase()
            );
        }
        Analysis::Shuffle {
            checkpoint,
            config,
            seed,
            output_dir,
        } => {
            let (net, cfg, base) = load_trained(&checkpoint, config.as_deref())?;
            let dir = analysis_dir(output_dir, "shuffle")?;
            write(&dir, RESOLVED, &cfg.to_toml())?;
            let (_, test) = cfg.load_data(&base)?;
            let r = shuffle_probe(&net, &test, &cfg.plan(), seed)?;
            write(
                &dir,
                "shuffle.csv",
                &format!(
                    "seed,mse_ordered,mse_shuffled,gap_ratio\n{seed},{},{},{}\n",
                    r.mse_ordered, r.mse_shuffled, r.gap_ratio
                ),
            )?;
            println!("ordered {} shuffled {} gap ratio {}", r.mse_ordered, r.mse_shuffled, r.gap_ratio);
        }
        Analysis::Paramtrace {
            checkpoint,
            config,
            layer,
            channel,
            y,
            x,
            output_dir,
        } => {
            let (net, cfg, base) = match (&checkpoint, &config) {
                (Some(ck), _) => load_trained(ck, config.as_deref())?,
                (None, Some(c)) => {
                    let cfg = RunConfig::load(c)?;
                    (NetworkParams::init(cfg.network_config(), cfg.seed)?, cfg, base_dir(c))
                }
                (None, None) => return Err(Error::Config("paramtrace needs --checkpoint or --config".into()).into()),
            };
            let dir = analysis_dir(output_dir, "paramtrace")?;
            write(&dir, RESOLVED, &cfg.to_toml())?;
            let (_, test) = cfg.load_data(&base)?;
            let site = NeuronSite { layer, channel, y, x };
            let rows = paramtrace(&net, &test, &cfg.plan(), site)?;
            write(&dir, "paramtrace.csv", &paramtrace_csv(&rows))?;
            println!("{} steps traced for {:?}", rows.len(), site);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Checkpoint(_) | Error::Shape { .. } | Error::InvalidArgument { .. }) => {
            EXIT_CONFIG
        }
        Some(Error::Divergence { .. } | Error::NonFinite { .. } | Error::NonFiniteGradient(_)) => EXIT_DIVERGED,
        Some(Error::Io(_) | Error::Npy(_)) => EXIT_IO,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, output_dir } => cmd_train(&config, output_dir),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(a) => cmd_analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
