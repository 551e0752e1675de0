use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nnk_core::diagnostics::DEFAULT_RISK_THRESHOLD;
use nnk_core::report::replay;
use nnk_core::{
    importance_metrics, loo_risk_all_channels, loo_risk_full_layer_with, rank_channels, read_snapshot, serve_loop,
    ChannelLooReport, ControllerConfig, EvalOptions, KernelSpec, NnkConfig, RunHistory, ServeConfig,
};

#[derive(Parser)]
#[command(
    name = "cwnnk",
    version,
    about = "Channel-wise NNK leave-one-out risk and early stopping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print one LOO risk line per channel of a snapshot.
    Evaluate {
        #[arg(long)]
        snapshot: PathBuf,
        #[command(flatten)]
        nnk: NnkArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Answer evaluate/status requests on stdin with decisions on stdout.
    Serve {
        /// Number of channels tracked by the controller.
        #[arg(long)]
        num_channels: Option<usize>,
        #[arg(long, default_value_t = 20)]
        patience: u32,
        /// Training steps per epoch.
        #[arg(long, default_value_t = 1)]
        eval_interval: u64,
        /// Epochs between evaluations.
        #[arg(long, default_value_t = 1)]
        eval_period: u64,
        /// Append run history records (JSON lines) to this file.
        #[arg(long)]
        history_out: Option<PathBuf>,
        /// Reuse neighborhoods across steps.
        #[arg(long)]
        cache: bool,
        #[command(flatten)]
        nnk: NnkArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Print importance metrics and the channel ranking for a snapshot.
    Diagnose {
        #[arg(long)]
        snapshot: PathBuf,
        /// Channels with risk below this pass.
        #[arg(long, default_value_t = DEFAULT_RISK_THRESHOLD)]
        threshold: f64,
        #[command(flatten)]
        nnk: NnkArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Re-run the controller over a stored history and compare decisions.
    Replay { history: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kernel {
    Gaussian,
    Cosine,
}

#[derive(Args)]
struct NnkArgs {
    #[arg(long, value_enum, default_value_t = Kernel::Cosine)]
    kernel: Kernel,
    /// Fixed Gaussian bandwidth; the median K-th neighbor distance when omitted.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 15)]
    k: usize,
}

impl NnkArgs {
    fn config(&self) -> Result<NnkConfig> {
        let kernel = match (self.kernel, self.sigma) {
            (Kernel::Cosine, None) => KernelSpec::cosine(),
            (Kernel::Cosine, Some(_)) => bail!("--sigma only applies to --kernel gaussian"),
            (Kernel::Gaussian, None) => KernelSpec::gaussian_adaptive(),
            (Kernel::Gaussian, Some(s)) => KernelSpec::gaussian(s),
        };
        let config = NnkConfig::with_k(self.k, kernel);
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Comma-separated channel ids to evaluate.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<u32>>,
    /// Evaluate this many randomly chosen nodes.
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the concatenated layer as a single channel.
    #[arg(long)]
    full_layer: bool,
}

impl EvalArgs {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            channel_subset: self.channels.clone(),
            subsample: self.subsample,
            seed: self.seed,
            ..EvalOptions::default()
        }
    }
}

fn channel_reports(snapshot: &PathBuf, nnk: &NnkArgs, eval: &EvalArgs) -> Result<Vec<ChannelLooReport>> {
    let config = nnk.config()?;
    let snap = read_snapshot(snapshot).with_context(|| format!("reading {}", snapshot.display()))?;
    let options = eval.options();
    if eval.full_layer {
        if eval.channels.is_some() {
            bail!("--channels and --full-layer are mutually exclusive");
        }
        Ok(vec![loo_risk_full_layer_with(&snap, &config, &options)?])
    } else {
        Ok(loo_risk_all_channels(&snap, &config, &options)?)
    }
}

fn channel_label(r: &ChannelLooReport) -> String {
    if r.is_full_layer() {
        "full".into()
    } else {
        r.channel.to_string()
    }
}

fn evaluate(snapshot: PathBuf, nnk: NnkArgs, eval: EvalArgs) -> Result<()> {
    let out = io::stdout().lock();
    let mut out = BufWriter::new(out);
    for r in channel_reports(&snapshot, &nnk, &eval)? {
        writeln!(
            out,
            "channel={} loo_risk={:.6} mean_neighbors={:.3} same_class_weight={:.4} zero_fraction={:.4} evaluated={} failed={}",
            channel_label(&r),
            r.loo_risk,
            r.mean_neighbor_count,
            r.mean_same_class_weight,
            r.zero_fraction,
            r.evaluated_nodes,
            r.failed_nodes.len()
        )?;
    }
    out.flush()?;
    Ok(())
}

fn diagnose(snapshot: PathBuf, threshold: f64, nnk: NnkArgs, eval: EvalArgs) -> Result<()> {
    let reports = channel_reports(&snapshot, &nnk, &eval)?;
    let metrics = importance_metrics(&reports);
    let ranking = rank_channels(&reports, threshold);
    let mut out = BufWriter::new(io::stdout().lock());
    writeln!(
        out,
        "rank channel loo_risk zero_fraction mean_neighbors same_class_weight"
    )?;
    for (rank, id) in ranking.order.iter().enumerate() {
        let m = metrics
            .iter()
            .find(|m| m.channel == *id)
            .expect("ranked channel has metrics");
        let label = if *id == nnk_core::FULL_LAYER {
            "full".to_string()
        } else {
            id.to_string()
        };
        writeln!(
            out,
            "{:>4} {:>7} {:.6} {:.4} {:.3} {:.4}",
            rank + 1,
            label,
            m.rank_score,
            m.zero_fraction,
            m.mean_neighbors,
            m.mean_same_class_weight
        )?;
    }
    let passing: Vec<String> = ranking.passing.iter().map(u32::to_string).collect();
    writeln!(out, "passing (risk < {}): [{}]", ranking.threshold, passing.join(","))?;
    out.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn serve(
    num_channels: Option<usize>,
    patience: u32,
    eval_interval: u64,
    eval_period: u64,
    history_out: Option<PathBuf>,
    cache: bool,
    nnk: NnkArgs,
    eval: EvalArgs,
) -> Result<bool> {
    if eval.channels.is_some() {
        bail!("serve tracks every channel; use --num-channels instead of --channels");
    }
    let channels = match (num_channels, eval.full_layer) {
        (_, true) => 1,
        (Some(c), false) => c,
        (None, false) => bail!("serve needs --num-channels (or --full-layer)"),
    };
    let controller = ControllerConfig {
        eval_interval,
        eval_period,
        ..ControllerConfig::new(channels, patience)
    };
    controller.validate()?;
    let config = ServeConfig {
        options: eval.options(),
        full_layer: eval.full_layer,
        cache_neighborhoods: cache,
        ..ServeConfig::new(nnk.config()?, controller)
    };
    let mut history = match &history_out {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    let outcome = serve_loop(stdin, stdout, config, history.as_mut().map(|h| h as &mut dyn Write))?;
    if let Some(mut h) = history {
        h.flush()?;
    }
    eprintln!(
        "requests={} evaluations={} errors={} stopped={}",
        outcome.requests, outcome.evaluations, outcome.errors, outcome.stopped
    );
    Ok(true)
}

fn replay_history(path: PathBuf) -> Result<bool> {
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let history =
        RunHistory::read_jsonl(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))?;
    let outcome = replay(&history)?;
    let state = &outcome.final_state;
    match outcome.mismatch {
        None => {
            println!(
                "replayed {} evaluations: identical (t*={}, stopped={})",
                outcome.steps,
                state.t_star,
                state.stopped()
            );
            Ok(true)
        }
        Some(m) => {
            println!(
                "decision mismatch at step {}: recorded {:?}, replayed {:?}",
                m.step, m.recorded, m.replayed
            );
            Ok(false)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Evaluate { snapshot, nnk, eval } => evaluate(snapshot, nnk, eval).map(|_| true),
        Command::Diagnose {
            snapshot,
            threshold,
            nnk,
            eval,
        } => diagnose(snapshot, threshold, nnk, eval).map(|_| true),
        Command::Serve {
            num_channels,
            patience,
            eval_interval,
            eval_period,
            history_out,
            cache,
            nnk,
            eval,
        } => serve(
            num_channels,
            patience,
            eval_interval,
            eval_period,
            history_out,
            cache,
            nnk,
            eval,
        ),
        Command::Replay { history } => replay_history(history),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
