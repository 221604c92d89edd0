//! `ong` command-line driver.
//!
//! Exit codes: 0 success, 1 config or validation error, 2 runtime stage
//! failure, 3 masked-weight nullity violation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use ong::pipeline::checkpoint::{load_checkpoint, save_tensors};
use ong::pipeline::config::RunConfig;
use ong::pipeline::{self, mask_stage, prepare, run_pipeline_with, run_sweep, score_stage};
use ong::{Exec, Network, OngError};

#[derive(Parser)]
#[command(
    name = "ong",
    version,
    about = "One-shot NMF-scored pruning with gradient-masked training"
)]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,

    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// Worker threads for parallel loops (default: one per core).
    #[cfg(feature = "parallel")]
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,

    /// Switch to target-sparsity mode with this target.
    #[arg(long, value_name = "FLOAT")]
    target_sparsity: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: score, mask, train, report.
    Run(RunArgs),
    /// Score the freshly initialized model and dump the score tensors.
    Score(RunArgs),
    /// Score and pick gamma; print gamma* and the achieved sparsity.
    Tune(RunArgs),
    /// Run a grid over target sparsity and/or NMF components.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated target sparsities.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        targets: Vec<f64>,
        /// Comma-separated NMF component counts.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        components: Vec<usize>,
    },
    /// Print a checkpoint's layers and sparsity report.
    Inspect {
        checkpoint: PathBuf,
        /// Print the sparsity report as JSON.
        #[arg(long)]
        json: bool,
    },
}

/// Error plus the exit code it maps to.
struct Failure {
    code: u8,
    error: OngError,
}

impl Failure {
    fn config(error: OngError) -> Self {
        Failure { code: 1, error }
    }
}

impl From<OngError> for Failure {
    fn from(error: OngError) -> Self {
        Failure {
            code: exit_code(&error),
            error,
        }
    }
}

fn exit_code(e: &OngError) -> u8 {
    match (e, e.root()) {
        (_, OngError::NullityViolation { .. }) => 3,
        (OngError::Stage { .. }, _) => 2,
        (_, OngError::Config(_) | OngError::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&args.config).map_err(Failure::config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.output {
        cfg.output_dir = o.clone();
    }
    if let Some(t) = args.target_sparsity {
        cfg.set_target_sparsity(t);
    }
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| OngError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn cmd_run(args: &RunArgs, exec: Exec) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let r = run_pipeline_with(&cfg, exec)?;
    println!("mode            {:?}", r.mode);
    println!("gamma*          {:.6}", r.gamma_star);
    if let Some(w) = r.gamma_search.as_ref().and_then(|s| s.warning.as_ref()) {
        println!("search warning  {w}");
    }
    println!(
        "sparsity        {:.4} ({} / {} prunable weights zero)",
        r.sparsity_report.global_sparsity,
        r.sparsity_report.global_zeros,
        r.sparsity_report.global_total
    );
    println!("test accuracy   {:.4}", r.final_test_accuracy);
    println!(
        "flops           dense {} sparse {} ({})",
        r.flops.dense, r.flops.sparse, r.flops.convention
    );
    println!("output          {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_score(args: &RunArgs, exec: Exec) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let (_, net) = prepare(&cfg)?;
    let scores = score_stage(&cfg, &net, exec)?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("scores.ongt");
    save_tensors(&path, scores.iter().map(|(id, s)| (id.as_str(), &s.scores)))?;
    println!(
        "{:<12} {:>10} {:>12} {:>12} {:>12} {:>12}",
        "layer", "shape", "mean", "std", "median", "mad"
    );
    for (id, s) in &scores {
        let st = s.scores.stats()?;
        let (r, c) = s.scores.shape();
        println!(
            "{id:<12} {:>10} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            format!("{r}x{c}"),
            st.mean,
            st.std,
            st.median,
            st.mad
        );
    }
    println!("scores written to {}", path.display());
    Ok(())
}

fn cmd_tune(args: &RunArgs, exec: Exec) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    if cfg.gamma_search.is_none() {
        return Err(Failure::config(OngError::Config(
            "tune needs a target: add [gamma_search] or pass --target-sparsity".into(),
        )));
    }
    let (_, net) = prepare(&cfg)?;
    let scores = score_stage(&cfg, &net, exec)?;
    let outcome = mask_stage(&cfg, &scores, exec)?;
    let search = outcome.search.as_ref().expect("target mode");
    let report = ong::masking::global_sparsity(&outcome.masks)?;
    println!("gamma*     {:.6}", outcome.gamma_star);
    println!("achieved   {:.6}", search.achieved);
    println!(
        "target     {:.6}",
        cfg.gamma_search.as_ref().unwrap().s_target
    );
    println!("iterations {} ({:?})", search.trace.len(), search.stop);
    if let Some(w) = &search.warning {
        println!("warning    {w}");
    }
    for (id, l) in &report.per_layer {
        println!(
            "  {id:<12} {:>8} / {:<8} {:.4}",
            l.zeros, l.total, l.sparsity
        );
    }
    Ok(())
}

fn cmd_sweep(
    args: &RunArgs,
    targets: &[f64],
    components: &[usize],
    exec: Exec,
) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let points = run_sweep(&cfg, targets, components, exec).map_err(Failure::config)?;
    println!(
        "{:>8} {:>6} {:>10} {:>10} {:>10}  dir",
        "target", "k", "gamma*", "sparsity", "accuracy"
    );
    let mut summary = Vec::new();
    let mut worst = 0u8;
    for p in &points {
        let t = p.target.map_or("-".into(), |t| format!("{t}"));
        let k = p.components.map_or("-".into(), |k| k.to_string());
        match &p.result {
            Ok(r) => {
                println!(
                    "{t:>8} {k:>6} {:>10.5} {:>10.4} {:>10.4}  {}",
                    r.gamma_star,
                    r.sparsity_report.global_sparsity,
                    r.final_test_accuracy,
                    p.output_dir.display()
                );
                summary.push(serde_json::json!({
                    "target": p.target,
                    "components": p.components,
                    "output_dir": p.output_dir,
                    "gamma_star": r.gamma_star,
                    "sparsity": r.sparsity_report.global_sparsity,
                    "final_test_accuracy": r.final_test_accuracy,
                }));
            }
            Err(e) => {
                println!("{t:>8} {k:>6} failed: {e}");
                worst = worst.max(exit_code(e));
                summary.push(serde_json::json!({
                    "target": p.target,
                    "components": p.components,
                    "output_dir": p.output_dir,
                    "error": e.to_string(),
                }));
            }
        }
    }
    let path = cfg.output_dir.join("sweep.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&summary).expect("json values"),
    )
    .map_err(|e| OngError::Io {
        path: path.clone(),
        source: e,
    })?;
    if worst > 0 {
        return Err(Failure {
            code: worst,
            error: OngError::Config(format!(
                "{} sweep point(s) failed",
                summary.iter().filter(|s| s.get("error").is_some()).count()
            )),
        });
    }
    Ok(())
}

fn print_network(net: &Network) {
    println!("input {:?}, seed {}", net.input_shape(), net.seed());
    for l in net.weighted_layers() {
        let (r, c) = l.weights.shape();
        let zeros = l.weights.count_zeros();
        println!(
            "  {:<12} {:<8} {:>9} prunable={:<5} masked={:<5} zeros {zeros}/{}",
            l.id(),
            l.kind().name(),
            format!("{r}x{c}"),
            l.is_prunable(),
            l.mask().is_some(),
            l.weights.len()
        );
    }
}

fn cmd_inspect(path: &Path, json: bool) -> Result<(), Failure> {
    let net = load_checkpoint(path)?;
    let report = net.sparsity_report()?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("plain struct")
        );
    } else {
        print_network(&net);
        println!(
            "global sparsity {:.6} ({} / {})",
            report.global_sparsity, report.global_zeros, report.global_total
        );
    }
    net.verify_nullity()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .init();

    #[cfg(feature = "parallel")]
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    info!("execution: {exec:?}");

    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, exec),
        Command::Score(a) => cmd_score(a, exec),
        Command::Tune(a) => cmd_tune(a, exec),
        Command::Sweep {
            run,
            targets,
            components,
        } => cmd_sweep(run, targets, components, exec),
        Command::Inspect { checkpoint, json } => cmd_inspect(checkpoint, *json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            if let OngError::Stage { .. } = f.error {
                eprintln!(
                    "partial outputs are marked with {}",
                    pipeline::INCOMPLETE_FILE
                );
            }
            ExitCode::from(f.code)
        }
    }
}
