//! `slv`: dataset generation, training, evaluation, ablation sweeps,
//! gradient checks and overlay rendering.
//!
//! Exit codes: 0 success, 1 usage / config / contract errors, 2 I/O errors.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use slv_core::config::RunConfig;
use slv_core::data::{build_dataset, GenConfig, Split, SplitCounts};
use slv_core::pipeline::{self, AblationAxis, EvalOptions, TrainOptions};
use slv_core::tensor::OpKind;
use slv_core::verify::{self, Scope};
use slv_core::SlvError;

#[derive(Parser)]
#[command(name = "slv", version, about = "Token-prompted audio-visual video segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train a model on the train split.
    Train(Train),
    /// Evaluate a checkpoint.
    Eval(Eval),
    /// Train and evaluate one run per value of an ablation axis.
    Ablate(Ablate),
    /// Run finite-difference gradient suites.
    Gradcheck(Gradcheck),
    /// Render prediction overlays as PPM images.
    RenderOverlays(RenderOverlays),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    seen: usize,
    #[arg(long, default_value_t = 0)]
    unseen: usize,
    #[arg(long, default_value_t = 0)]
    null: usize,
    /// Generator settings as JSON; defaults when omitted.
    #[arg(long)]
    gen_config: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    /// Run config JSON; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Save and stop after this many optimizer steps.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "seen,unseen,null")]
    splits: String,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    dump_masks: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    /// One of layers, n_seg, strategy, freeze.
    #[arg(long)]
    axis: String,
    /// Comma-separated values. Freeze takes none, decoder, decoder+prompt.
    #[arg(long)]
    values: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where per-run checkpoints and reports go (default: next to --out).
    #[arg(long)]
    work: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    /// ops, fusion, decoder, end2end or all.
    #[arg(long, default_value = "all")]
    scope: String,
    /// Corrupt one backward rule to exercise the harness.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct RenderOverlays {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn parse_splits(s: &str) -> Result<Vec<Split>> {
    let splits = s
        .split(',')
        .filter(|p| !p.is_empty())
        .map(Split::parse)
        .collect::<slv_core::Result<Vec<_>>>()?;
    if splits.is_empty() {
        bail!(SlvError::Input("no splits given".into()));
    }
    Ok(splits)
}

fn gen_data(a: GenData) -> Result<bool> {
    let cfg = match &a.gen_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| SlvError::io(p, e))?;
            serde_json::from_str::<GenConfig>(&text)
                .map_err(|e| SlvError::Config(format!("{}: {e}", p.display())))?
        }
        None => GenConfig::default(),
    };
    let counts = SplitCounts {
        train: a.train,
        seen: a.seen,
        unseen: a.unseen,
        null: a.null,
    };
    let m = build_dataset(a.seed, &cfg, counts, &a.out)?;
    println!("wrote {} samples to {}", m.samples.len(), a.out.display());
    Ok(true)
}

fn train(a: Train) -> Result<bool> {
    let cfg = load_config(a.config.as_ref())?;
    let opts = TrainOptions {
        resume: a.resume,
        stop_after: a.stop_after,
    };
    let log = pipeline::train_run(&cfg, &a.data, &a.out, &opts)?;
    if let Some(last) = log.last() {
        println!("step {} loss {:.6}", last.step, last.loss);
    }
    println!("checkpoint {}", a.out.display());
    Ok(true)
}

fn eval(a: Eval) -> Result<bool> {
    let splits = parse_splits(&a.splits)?;
    let opts = EvalOptions {
        json: a.json,
        dump_masks: a.dump_masks,
    };
    let rep = pipeline::eval_run(&a.ckpt, &a.data, &splits, &a.report, &opts)?;
    print!("{}", rep.to_csv());
    Ok(true)
}

fn ablate(a: Ablate) -> Result<bool> {
    let axis: AblationAxis = a.axis.parse()?;
    let values: Vec<String> = a.values.split(',').filter(|v| !v.is_empty()).map(String::from).collect();
    if values.is_empty() {
        bail!(SlvError::Input("no ablation values given".into()));
    }
    let base = load_config(a.config.as_ref())?;
    let work = a.work.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".runs");
        PathBuf::from(p)
    });
    let n = pipeline::ablate(&base, &a.data, axis, &values, &a.out, &work)
        .with_context(|| format!("ablation stopped; completed rows are in {}", a.out.display()))?;
    println!("wrote {n} rows to {}", a.out.display());
    Ok(true)
}

fn gradcheck(a: Gradcheck) -> Result<bool> {
    let scopes: Vec<Scope> = if a.scope == "all" {
        Scope::ALL.to_vec()
    } else {
        vec![a.scope.parse()?]
    };
    let fault = match &a.inject_fault {
        Some(name) => Some(
            OpKind::from_name(name).ok_or_else(|| SlvError::Input(format!("unknown op {name:?}")))?,
        ),
        None => None,
    };
    let mut ok = true;
    for scope in scopes {
        let rep = verify::run(scope, fault)?;
        for g in &rep.groups {
            println!(
                "{scope:<8} {:<28} max_rel_err {:.3e} {}",
                g.name,
                g.max_rel_err,
                if g.passed() { "ok" } else { "FAIL" }
            );
        }
        for g in rep.failures() {
            eprintln!("gradient mismatch in {scope}: {}", g.name);
        }
        ok &= rep.passed();
    }
    println!("{}", if ok { "all gradients match" } else { "gradient check FAILED" });
    Ok(ok)
}

fn render(a: RenderOverlays) -> Result<bool> {
    let n = pipeline::render_overlays(&a.data, &a.predictions, &a.out)?;
    println!("wrote {n} overlays to {}", a.out.display());
    Ok(true)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SLV_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| SlvError::Config(format!("SLV_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
        info!("using {n} worker threads");
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<SlvError>()) {
        Some(e) if e.is_io() => 2,
        _ => 1,
    }
}

/// Context chain down to the first library error, whose message already
/// carries its own cause.
fn describe(err: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for e in err.chain() {
        parts.push(e.to_string());
        if e.downcast_ref::<SlvError>().is_some() {
            break;
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|_| match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::RenderOverlays(a) => render(a),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
