use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmoe::config::{RoutingMode, RunConfig};
use cmoe::harness::{write_outputs, Learner, RunManifest, CHECKPOINT_DIR, RUN_MANIFEST_FILE};
use cmoe::pgke::decide_layer;
use cmoe::tasks::{Similarity, StreamManifest};
use cmoe::Error;

#[derive(Parser)]
#[command(name = "cmoe", version, about = "Replay-free continual learning on a tiny MoE-LoRA model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full task stream, then write manifest, metrics and checkpoint.
    Run(RunArgs),
    /// Print per-layer probe activations and the expansion decision of a task.
    ProbeReport(ProbeReportArgs),
    /// Print the task-locator confusion matrix (rows predicted, columns true).
    Confusion(ConfusionArgs),
    /// Print the effective configuration as TOML.
    Config(OverrideArgs),
}

#[derive(Args)]
struct OverrideArgs {
    /// TOML config file; flags below take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for the stream, model and every training stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of tasks in the stream.
    #[arg(long)]
    tasks: Option<usize>,
    /// disjoint, overlapping or duplicate.
    #[arg(long)]
    similarity: Option<Similarity>,
    /// Comma-separated routing modes: ptl, oracle, last, random, shared.
    #[arg(long)]
    routing: Option<String>,
    /// Expansion sensitivity in mean(Act) - alpha * std(Act).
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Probe experts attached to each layer during probe locating.
    #[arg(long)]
    probes_per_layer: Option<usize>,
    /// Upper bound on experts added to one layer per task.
    #[arg(long)]
    cap: Option<usize>,
    /// Output directory; overrides the config file.
    #[arg(long, env = "CMOE_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args)]
struct ProbeReportArgs {
    /// Run directory or manifest file.
    #[arg(long, default_value = ".")]
    run: PathBuf,
    #[arg(long)]
    task: usize,
    /// Recompute thresholds and decisions with this alpha.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct ConfusionArgs {
    /// Checkpoint directory, or a run directory containing one.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stream manifest to evaluate instead of the checkpoint's own stream.
    #[arg(long)]
    stream: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::ProbeReport(a) => cmd_probe_report(a),
        Command::Confusion(a) => cmd_confusion(a),
        Command::Config(a) => load_config(&a).map(|c| print!("{}", c.to_toml())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

fn load_config(a: &OverrideArgs) -> cmoe::Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::config("--config", format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.tasks {
        cfg.stream.n_tasks = n;
    }
    if let Some(s) = a.similarity {
        cfg.stream.similarity = s;
    }
    if let Some(r) = &a.routing {
        let modes = RoutingMode::parse_list(r)?;
        cfg.eval.shared_baseline = modes.contains(&RoutingMode::Shared);
        cfg.eval.routing = modes;
    }
    if let Some(x) = a.alpha {
        cfg.probe.alpha = x;
    }
    if let Some(n) = a.probes_per_layer {
        cfg.probe.n_probes_per_layer = n;
    }
    if let Some(n) = a.cap {
        cfg.probe.n_new_experts_cap = n;
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn cmd_run(a: RunArgs) -> cmoe::Result<()> {
    let cfg = load_config(&a.overrides)?;
    let out = cfg.output_dir.clone();
    let mut learner = Learner::new(cfg)?;
    while !learner.is_finished() {
        learner.step()?;
        let r = learner.records.last().expect("record after a step");
        let grown = r.expansion.as_ref().map_or(String::from("bootstrap"), |e| {
            format!("{} layers expanded", e.plan.expanded_layers())
        });
        eprintln!("task {} ({}) done: {grown}, experts per layer {:?}", r.task, r.family, r.expert_counts);
    }
    write_outputs(&learner, &out)?;
    println!("routing  mean_immediate  mean_last  bwt_pp");
    for (mode, s) in learner.summaries()? {
        println!(
            "{:<8} {:>14} {:>10} {:>7}",
            mode.as_str(),
            pct(s.mean_immediate),
            pct(s.mean_last),
            pct(s.bwt)
        );
    }
    match learner.param_ratio() {
        Some(r) => println!("param_ratio {r:.4}"),
        None => println!("param_ratio n/a"),
    }
    println!("outputs written to {}", out.display());
    Ok(())
}

fn cmd_probe_report(a: ProbeReportArgs) -> cmoe::Result<()> {
    let m = RunManifest::load(&a.run)?;
    let record = m
        .tasks
        .iter()
        .find(|r| r.task == a.task)
        .ok_or_else(|| Error::config("--task", format!("task {} not in the manifest ({} tasks)", a.task, m.tasks.len())))?;
    let Some(e) = &record.expansion else {
        println!("task {} ({}): initial expert group, no probe stage", record.task, record.family);
        for (h, n) in record.expert_counts.iter().enumerate() {
            println!("layer {h}: not expanded, {n} experts");
        }
        return Ok(());
    };
    let alpha = a.alpha.unwrap_or(e.alpha);
    let cap = m.config.probe.n_new_experts_cap;
    println!("task {} ({}) alpha {alpha} metric {:?} cap {cap}", record.task, record.family, e.metric);
    for l in &e.layers {
        let d = decide_layer(&l.act, &l.probe_indices, alpha, cap);
        let acts: Vec<String> = l.act.iter().map(|v| v.to_string()).collect();
        let verdict = if d.n_new > 0 {
            format!("expand by {}", d.n_new)
        } else {
            "not expanded".to_string()
        };
        println!(
            "layer {}: act [{}] probes {:?} threshold {} -> {verdict}",
            l.layer,
            acts.join(", "),
            l.probe_indices,
            d.threshold
        );
    }
    println!("param_ratio {:.4} (as trained, alpha {})", e.params.ratio, e.alpha);
    Ok(())
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    let nested = p.join(CHECKPOINT_DIR);
    if nested.is_dir() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn cmd_confusion(a: ConfusionArgs) -> cmoe::Result<()> {
    let mut learner = Learner::load_checkpoint(&checkpoint_dir(&a.checkpoint))?;
    if learner.bank.is_empty() {
        return Err(Error::config("--checkpoint", "the primitive bank is empty"));
    }
    if let Some(p) = &a.stream {
        let path = if p.is_dir() { p.join(RUN_MANIFEST_FILE) } else { p.clone() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::config("--stream", format!("{}: {e}", path.display())))?;
        let stream = match StreamManifest::from_json(&text) {
            Ok(s) => s,
            Err(_) => RunManifest::load(&path)?.stream,
        };
        if stream.tasks.len() < learner.bank.len() {
            return Err(Error::config(
                "--stream",
                format!("{} tasks but the bank holds {}", stream.tasks.len(), learner.bank.len()),
            ));
        }
        learner.stream = stream;
    }
    let m = learner.confusion()?;
    let n = m.len();
    let header: Vec<String> = (0..n).map(|i| format!("true{i}")).collect();
    println!("predicted,{}", header.join(","));
    for (p, row) in m.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("{p},{}", cells.join(","));
    }
    Ok(())
}
