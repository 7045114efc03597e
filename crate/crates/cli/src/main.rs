use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use featvae::aggregation::AggregationMethod;
use featvae::metrics::{parse_metric_list, Metric};
use featvae::pipeline::{self, PipelineError, RunConfig};
use serde_json::json;

/// Feature-map aggregation, beta-VAE training and disentanglement scoring.
#[derive(Parser)]
#[command(name = "featvae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render labelled synthetic feature maps into a .dfm file.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Pool a .dfm of feature maps into unit-norm vectors.
    Aggregate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Train the beta-VAE on a .dfm of vectors; writes model.ckpt and history.json.
    Train {
        #[arg(long)]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Score a checkpoint on a labelled .dfm of vectors.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Report path.
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// synth -> aggregate -> train -> eval into one output directory.
    Pipeline {
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
}

/// Values given on the command line win over the config file, which wins over
/// the built-in defaults.
#[derive(Args)]
struct Overrides {
    /// Flat JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; every stage derives its own stream from it [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Aggregation method [default: rmac] [possible values: rmac, rmac-whitened, avg, max]
    #[arg(long, value_parser = parse_method)]
    method: Option<AggregationMethod>,
    /// Latent dimensions C [default: 18]
    #[arg(long)]
    latents: Option<usize>,
    /// Training epochs N [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// KL weight before annealing starts [default: 0.0001]
    #[arg(long)]
    beta_start: Option<f64>,
    /// KL weight once annealing ends [default: 0.12]
    #[arg(long)]
    beta_end: Option<f64>,
    /// First epoch of the cosine ramp [default: 1]
    #[arg(long)]
    anneal_start: Option<usize>,
    /// Last epoch of the cosine ramp [default: 19, i.e. epochs - 1]
    #[arg(long)]
    anneal_end: Option<usize>,
    /// Minibatch size [default: 256]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Comma separated subset of factorvae,mig,sap,dci,irs [default: all]
    #[arg(long, value_parser = parse_metrics)]
    metrics: Option<Vec<Metric>>,
}

fn parse_method(s: &str) -> std::result::Result<AggregationMethod, String> {
    s.parse()
}

fn parse_metrics(s: &str) -> std::result::Result<Vec<Metric>, String> {
    parse_metric_list(s).map_err(|e| e.to_string())
}

impl Overrides {
    fn resolve(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$target = v; })*
            };
        }
        set!(seed => seed, method => method, latents => latents, epochs => epochs,
             beta_start => beta_start, beta_end => beta_end, anneal_start => anneal_start,
             batch_size => batch_size, lr => lr, metrics => metrics);
        if self.anneal_end.is_some() {
            cfg.anneal_end = self.anneal_end;
        }
        Ok(cfg.resolved()?)
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { output, opts } => {
            let cfg = opts.resolve()?;
            let maps = pipeline::cmd_synth(&cfg, &output).context("synth")?;
            print_json(&json!({"output": path_str(&output), "n": maps.n, "c": maps.c, "h": maps.h, "w": maps.w}))
        }
        Command::Aggregate { input, output, opts } => {
            let cfg = opts.resolve()?;
            let v = pipeline::cmd_aggregate(&cfg, &input, &output).with_context(|| format!("aggregate {}", input.display()))?;
            print_json(&json!({"output": path_str(&output), "n": v.n, "c": v.c, "method": cfg.method}))
        }
        Command::Train { input, output, opts } => {
            let cfg = opts.resolve()?;
            let out = pipeline::cmd_train(&cfg, &input, &output).with_context(|| format!("train {}", input.display()))?;
            print_json(&json!({"output": path_str(&output), "history": out.history}))
        }
        Command::Eval {
            checkpoint,
            input,
            output,
            opts,
        } => {
            let cfg = opts.resolve()?;
            let report = pipeline::cmd_eval(&cfg, &checkpoint, &input, &output).with_context(|| format!("eval {}", checkpoint.display()))?;
            print_json(&serde_json::to_value(report)?)
        }
        Command::Pipeline { output, opts } => {
            let cfg = opts.resolve()?;
            let out = pipeline::cmd_pipeline(&cfg, &output).context("pipeline")?;
            print_json(&json!({
                "output": path_str(&output),
                "report": out.report,
                "baseline": out.baseline,
                "final_epoch": out.history.last(),
            }))
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<PipelineError>().map(PipelineError::kind))
        .unwrap_or("error")
}

/// The context chain joined with ": ", skipping causes an outer message already
/// spells out.
fn message(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !parts.iter().any(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let body = json!({"error": error_kind(&err), "message": message(&err)});
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
