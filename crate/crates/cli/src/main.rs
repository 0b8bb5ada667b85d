#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tutorcount::density::{cluster_distances, histogram_of, make_density_map, round4, DEFAULT_SIGMA};
use tutorcount::experiment::{run_ablation, write_ablation_csv};
use tutorcount::files::write_atomic;
use tutorcount::gradcheck::{standard_suite, SUITE_TOLERANCE};
use tutorcount::nets::read_checkpoint;
use tutorcount::synth::{generate_dataset, read_dataset, write_dataset};
use tutorcount::trainer::{evaluate, save_checkpoints, train_with, write_eval_csv, write_records_csv, Mode};
use tutorcount::{Error, Result};

use config::Overrides;

#[derive(Parser)]
#[command(name = "tutorcount", version, about = "Error-driven curriculum training for density-map crowd counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crowd dataset.
    #[command(after_long_help = config::RECIPE_KEYS)]
    GenData {
        /// Recipe file; defaults are used when omitted.
        #[arg(long)]
        recipe: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a main network, optionally with the tutor.
    #[command(after_long_help = config::TRAIN_KEYS)]
    Train {
        /// Training config file; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Held-out scenes for the final evaluation; the training set otherwise.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// baseline, sf or sf-tn.
        #[arg(long)]
        mode: Option<Mode>,
        /// Weight floor T.
        #[arg(long)]
        t: Option<f64>,
        /// Tutoring margin M.
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        scale_factor: Option<f64>,
    },
    /// Score a main-network checkpoint: counts are sum(prediction) / s.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-scene CSV destination; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pixel-value histogram and group distances of unscaled density maps.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000")]
        scale_factors: Vec<f64>,
        /// Output directory [<data>/analysis].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 1)]
        downsample: usize,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
    },
    /// Run the finite-difference gradient suite; exits 1 on any failure.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Baseline / sf / sf-tn comparison over several seeds on synthetic data.
    #[command(after_long_help = config::ABLATION_KEYS)]
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn entries(path: Option<&Path>) -> Result<Vec<config::Entry>> {
    path.map(config::read).transpose().map(Option::unwrap_or_default)
}

fn gen_data(recipe: Option<&Path>, count: usize, out: &Path) -> Result<()> {
    let recipe = config::recipe(&entries(recipe)?)?;
    let scenes = generate_dataset(&recipe, count)?;
    write_dataset(out, &scenes)?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn train(
    config_path: Option<&Path>,
    data: &Path,
    test: Option<&Path>,
    out: &Path,
    over: Overrides,
) -> Result<ExitCode> {
    let cfg = {
        let mut cfg = config::train_config(&entries(config_path)?, &over)?;
        cfg.checkpoint_dir = Some(out.to_path_buf());
        cfg
    };
    let scenes = read_dataset(data)?;
    let test_scenes = test.map(read_dataset).transpose()?;
    std::fs::create_dir_all(out)?;

    let mut epoch_loss = (0usize, 0.0, 0usize);
    let outcome = train_with(&scenes, &cfg, |r| {
        if r.epoch != epoch_loss.0 {
            eprintln!("epoch {} mean main_loss {}", epoch_loss.0 + 1, epoch_loss.1 / epoch_loss.2 as f64);
            epoch_loss = (r.epoch, 0.0, 0);
        }
        epoch_loss.1 += r.main_loss;
        epoch_loss.2 += 1;
    })?;
    if epoch_loss.2 > 0 {
        eprintln!("epoch {} mean main_loss {}", epoch_loss.0 + 1, epoch_loss.1 / epoch_loss.2 as f64);
    }
    write_atomic(&out.join("telemetry.csv"), |w| write_records_csv(w, &outcome.records))?;
    if let Some(err) = outcome.divergence {
        eprintln!("error: training diverged: {err}");
        return Ok(ExitCode::from(3));
    }
    save_checkpoints(out, "final", &cfg, &outcome.state)?;
    let eval_set = test_scenes.as_deref().unwrap_or(&scenes);
    let report = evaluate(eval_set, &cfg.main_spec, &outcome.state.main, cfg.scale_factor())?;
    write_atomic(&out.join("eval.csv"), |w| write_eval_csv(w, &report))?;
    println!("MAE {} MSE {}", report.mae, report.mse);
    Ok(ExitCode::SUCCESS)
}

fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let ckpt = read_checkpoint(&mut BufReader::new(File::open(checkpoint)?)).map_err(|e| match e {
        Error::Io(io) => Error::Format { what: "checkpoint", msg: format!("{}: {io}", checkpoint.display()) },
        other => other,
    })?;
    if ckpt.spec.weight_floor().is_some() {
        return Err(Error::invalid(format!("{} holds a tutor, not a counting network", checkpoint.display())));
    }
    let scenes = read_dataset(data)?;
    let report = evaluate(&scenes, &ckpt.spec, &ckpt.params, ckpt.scale_factor)?;
    match out {
        Some(path) => {
            write_atomic(path, |w| write_eval_csv(w, &report))?;
            println!("MAE {} MSE {}", report.mae, report.mse);
        }
        None => {
            write_eval_csv(&mut io::stdout().lock(), &report)?;
            eprintln!("MAE {} MSE {}", report.mae, report.mse);
        }
    }
    Ok(())
}

fn analyze(data: &Path, factors: &[f64], out: Option<&Path>, bins: usize, downsample: usize, sigma: f64) -> Result<()> {
    if factors.is_empty() || factors.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::invalid("scale factors must be positive"));
    }
    let scenes = read_dataset(data)?;
    let mut values = Vec::new();
    for s in &scenes {
        values.extend_from_slice(make_density_map(s, sigma, downsample, 1.0)?.values());
    }
    if values.is_empty() {
        return Err(Error::invalid(format!("{} holds no scenes", data.display())));
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| data.join("analysis"));
    std::fs::create_dir_all(&out)?;

    let hist = histogram_of(&values, bins)?;
    write_atomic(&out.join("histogram.csv"), |w| {
        writeln!(w, "lower,upper,count")?;
        for b in &hist {
            writeln!(w, "{},{},{}", b.lower, b.upper, b.count)?;
        }
        Ok(())
    })?;

    // Quantise once so every factor sees the same groups.
    let base: Vec<f64> = values.iter().map(|v| round4(*v)).collect();
    let columns: Vec<Vec<f64>> = factors
        .iter()
        .map(|f| cluster_distances(&base.iter().map(|v| v * f).collect::<Vec<_>>()))
        .map(|g| g.into_iter().map(|d| d.distance).collect())
        .collect();
    let groups = cluster_distances(&base);
    if columns.iter().any(|c| c.len() != groups.len()) {
        return Err(Error::invalid("scale factors must keep distinct groups distinct (use factors >= 1)"));
    }
    write_atomic(&out.join("distances.csv"), |w| {
        write!(w, "group_value")?;
        for f in factors {
            write!(w, ",distance_s{f}")?;
        }
        writeln!(w)?;
        for (i, g) in groups.iter().enumerate() {
            write!(w, "{}", g.value)?;
            for c in &columns {
                write!(w, ",{}", c[i])?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;

    let n = values.len() as f64;
    let max = values.iter().cloned().fold(0.0, f64::max);
    let below = values.iter().filter(|v| **v < 1e-3).count() as f64 / n;
    let above_half = values.iter().filter(|v| **v > max / 2.0).count() as f64 / n;
    println!("pixels {} groups {}", values.len(), groups.len());
    println!("fraction below 0.001 {below}");
    println!("peak value {max}");
    println!("fraction above half peak {above_half}");
    println!("wrote {}", out.display());
    Ok(())
}

fn check_grad(seed: u64) -> Result<ExitCode> {
    let suite = standard_suite(seed)?;
    let mut worst = 0.0_f64;
    for e in &suite {
        println!("{:<40} {:.3e} {}", e.name, e.max_rel_error, if e.passed() { "ok" } else { "FAIL" });
        worst = if e.max_rel_error.is_nan() { f64::INFINITY } else { worst.max(e.max_rel_error) };
    }
    println!("max relative error {worst:.3e} (tolerance {SUITE_TOLERANCE:.0e})");
    Ok(if suite.iter().all(|e| e.passed()) { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn ablate(config_path: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = config::ablation_config(&entries(config_path)?)?;
    let report = run_ablation(&cfg, |r| {
        eprintln!(
            "seed {} {:<8} MAE {:.4} MSE {:.4}{}",
            r.seed,
            r.mode,
            r.mae,
            r.mse,
            if r.diverged { " (diverged)" } else { "" }
        )
    })?;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("ablation.csv"), |w| write_ablation_csv(w, &report))?;
    for mode in Mode::ALL {
        if let Some(m) = report.median_mae(mode) {
            println!("median MAE {mode} {m}");
        }
    }
    let (wins, n) = report.wins(Mode::SfPlusTutor, Mode::SfOnly);
    println!("sf-tn <= sf on {wins} of {n} seeds");
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { recipe, count, out } => gen_data(recipe.as_deref(), count, &out).map(|_| ExitCode::SUCCESS),
        Command::Train { config, data, test, out, mode, t, margin, scale_factor } => {
            train(config.as_deref(), &data, test.as_deref(), &out, Overrides { mode, t, margin, scale_factor })
        }
        Command::Eval { checkpoint, data, out } => eval(&checkpoint, &data, out.as_deref()).map(|_| ExitCode::SUCCESS),
        Command::Analyze { data, scale_factors, out, bins, downsample, sigma } => {
            analyze(&data, &scale_factors, out.as_deref(), bins, downsample, sigma).map(|_| ExitCode::SUCCESS)
        }
        Command::CheckGrad { seed } => check_grad(seed),
        Command::Ablate { config, out } => ablate(config.as_deref(), &out).map(|_| ExitCode::SUCCESS),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Divergence { .. } => 3,
                _ => 2,
            })
        }
    }
}
