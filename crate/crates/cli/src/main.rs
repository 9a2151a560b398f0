//! `stb`: batch front end for diagnostics, training and evaluation.
//!
//! Every command reads one TOML config (`--config`, defaults otherwise),
//! applies `--set key=value` overrides, writes the resolved config and its
//! CSV reports into `output.dir`, and prints a short summary. Exit status is
//! 0 on success, 2 for invalid input and 1 for runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stbalance::config::RunConfig;
use stbalance::entropy::mismatch_report;
use stbalance::experiment::{
    anchor, load_dataset, restore_model, run_gradcheck, sweep, sweep_values, synthesize, write_predictions_csv,
    write_sweep_csv, write_synth, SweepAxis,
};
use stbalance::graph::{fit_embedding, FitConfig};
use stbalance::train::{evaluate, predict_windows, train, window_shape, write_trace, Split};
use stbalance::{checkpoint, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "stb", version, about = "Spatiotemporal forecasting with low-rank graph embeddings")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads (sweep points run concurrently when above 1).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Spatial/temporal entropy per look-back window.
    Diagnose,
    /// Fit a standalone low-rank embedding of the first prior graph.
    Embed,
    /// Generate the synthetic series and graphs.
    Synth,
    /// Train and store a checkpoint.
    Train,
    /// Forecast the test split with a stored checkpoint.
    Predict {
        /// Weights file; defaults to `<output.dir>/model.stb`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a stored checkpoint on the test split against the baselines.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one model per value along an axis (`window` or `rank`).
    Sweep {
        #[arg(long)]
        axis: String,
    },
    /// Finite-difference check of the training gradient on a toy model.
    Gradcheck,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STB_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    let jobs = cli.jobs.max(1);
    if !matches!(cli.command, Command::Sweep { .. }) {
        // Gradient chunks and evaluation run on rayon's global pool.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::debug!("thread pool already initialised: {e}");
        }
    }
    let out = &cfg.output.dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = out.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml()).map_err(|e| Error::io(&resolved, e))?;

    match &cli.command {
        Command::Diagnose => diagnose(&cfg, out),
        Command::Embed => embed(&cfg, out),
        Command::Synth => synth(&cfg, out),
        Command::Train => train_cmd(&cfg, out),
        Command::Predict { checkpoint } => predict(&cfg, out, &weights_path(out, checkpoint)),
        Command::Eval { checkpoint } => eval(&cfg, out, &weights_path(out, checkpoint)),
        Command::Sweep { axis } => sweep_cmd(&cfg, out, axis.parse()?, jobs),
        Command::Gradcheck => gradcheck(&cfg, out),
    }
}

fn weights_path(out: &Path, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| out.join("model.stb"))
}

fn diagnose(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load_dataset(cfg)?;
    let report = mismatch_report(&data.graphs[0], &data.raw, &cfg.entropy.windows, cfg.entropy.bins)?;
    let path = out.join("entropy.csv");
    report.write_csv(&path)?;
    println!("spatial entropy {:.4} over {} nodes", report.h_spatial, report.n_nodes);
    for ((w, ht), m) in report.windows.iter().zip(&report.h_temporal).zip(&report.mismatch) {
        println!("  window {w:>6}: temporal entropy {ht:.4}, mismatch {m:.4}");
    }
    println!("recommended window {}; wrote {}", report.recommended(), path.display());
    Ok(())
}

fn embed(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load_dataset(cfg)?;
    let e = &cfg.model.embedding;
    let fit = fit_embedding(
        &data.graphs[0],
        &FitConfig {
            rank: e.rank,
            beta: e.beta,
            negatives_per_edge: e.negatives_per_edge,
            seed: cfg.train.seed,
            init: e.init,
            ..FitConfig::default()
        },
    )?;
    let path = out.join("embedding.csv");
    fit.embedding.write_csv(&path)?;
    let trace = out.join("embed_trace.csv");
    let text: String = std::iter::once("step,loss\n".to_string())
        .chain(fit.trace.iter().enumerate().map(|(i, l)| format!("{i},{l:?}\n")))
        .collect();
    std::fs::write(&trace, text).map_err(|err| Error::io(&trace, err))?;
    println!(
        "rank-{} embedding of {} nodes: edge loss {:.6}; wrote {}",
        fit.embedding.rank(),
        fit.embedding.n_nodes(),
        fit.edge_loss,
        path.display()
    );
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = synthesize(cfg)?;
    let files = write_synth(out, &s)?;
    println!(
        "{} nodes, {} steps, {} edges",
        s.series.n_nodes(),
        s.series.n_steps(),
        s.distance_graph.n_edges()
    );
    for f in files {
        println!("  wrote {}", f.display());
    }
    Ok(())
}

fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load_dataset(cfg)?;
    let outcome = train(&cfg.model, &data, &cfg.train, anchor(cfg))?;
    let weights = out.join("model.stb");
    checkpoint::save_checkpoint(&weights, &outcome.store, cfg, &data.normalizer)?;
    write_trace(&out.join("trace.csv"), &outcome.trace)?;
    outcome
        .model
        .embedding
        .embed_nodes(&outcome.store)?
        .write_csv(&out.join("embedding.csv"))?;
    println!(
        "{} epochs, best validation MAE {:.4} at epoch {}; wrote {}",
        outcome.trace.len(),
        outcome.best_val_mae,
        outcome.best_epoch,
        weights.display()
    );
    Ok(())
}

fn predict(cfg: &RunConfig, out: &Path, weights: &Path) -> Result<()> {
    let data = load_dataset(cfg)?;
    let (model, store, _) = restore_model(cfg, &data, weights)?;
    let shape = window_shape(&cfg.model, cfg.train.eval_stride, data.target_feature);
    let windows = data.windows(shape, Split::Test, anchor(cfg))?;
    let p = predict_windows(&model, &store, &windows, &data)?;
    let path = out.join("predictions.csv");
    write_predictions_csv(&path, &p)?;
    println!("{} test windows, MAE {:.4}; wrote {}", p.ends.len(), p.mae(), path.display());
    Ok(())
}

fn eval(cfg: &RunConfig, out: &Path, weights: &Path) -> Result<()> {
    let data = load_dataset(cfg)?;
    let (model, store, _) = restore_model(cfg, &data, weights)?;
    let report = evaluate(&model, &store, &data, Split::Test, cfg.train.eval_stride, anchor(cfg))?;
    report.write_metrics(&out.join("metrics.csv"))?;
    report.write_baselines(&out.join("baselines.csv"))?;
    report.horizon_errors.write_csv(&out.join("horizon_errors.csv"))?;
    println!("{} test windows", report.n_samples);
    for (name, m) in [("st_balance", &report.overall), ("hl", &report.hl), ("climatology", &report.climatology)] {
        println!("  {name:<12} MAE {:.4}  RMSE {:.4}  R2 {:.4}", m.mae, m.rmse, m.r2);
    }
    println!("wrote metrics.csv, baselines.csv, horizon_errors.csv to {}", out.display());
    Ok(())
}

fn sweep_cmd(cfg: &RunConfig, out: &Path, axis: SweepAxis, jobs: usize) -> Result<()> {
    let data = load_dataset(cfg)?;
    let values = sweep_values(axis, cfg, data.raw.n_nodes());
    let points = sweep(axis, &values, cfg, &data, jobs)?;
    let name = match axis {
        SweepAxis::WindowLength => "sweep_window.csv",
        SweepAxis::EmbedRank => "sweep_rank.csv",
    };
    let path = out.join(name);
    write_sweep_csv(&path, &points)?;
    for p in &points {
        match &p.test_mae {
            Ok(v) => println!("  {:>6}: test MAE {v:.4}", p.value),
            Err(e) => println!("  {:>6}: failed ({e})", p.value),
        }
    }
    println!("wrote {}", path.display());
    if points.iter().all(|p| p.test_mae.is_err()) {
        return Err(Error::Diagnostic("every sweep point failed".into()));
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<()> {
    let run = run_gradcheck(cfg)?;
    let r = &run.report;
    let path = out.join("gradcheck.csv");
    let text: String = std::iter::once("param,max_rel_error\n".to_string())
        .chain(r.per_param.iter().map(|(n, e)| format!("{n},{e:e}\n")))
        .collect();
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!(
        "{} parameters ({:?}), seed {}: max relative error {:.3e} in {}",
        run.n_params, r.mode, run.seed, r.max_rel_error, r.worst
    );
    println!("wrote {}", path.display());
    if !r.passes(cfg.gradcheck.tolerance) {
        return Err(Error::Diagnostic(format!(
            "max relative error {:.3e} exceeds gradcheck.tolerance {:.1e}",
            r.max_rel_error, cfg.gradcheck.tolerance
        )));
    }
    Ok(())
}
