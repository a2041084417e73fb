//! Command-line front end: `run` executes a configured experiment,
//! `pl-testbed` runs the quadratic convergence testbed, `selftest` runs the
//! built-in property suites.
//!
//! Exit codes: 0 success, 1 divergence, 2 configuration or parse error.

use clap::{Parser, Subcommand};
use fedsparq::harness::{
    self, pl, selftest, ExperimentConfig, PlConfig, PlStrategy,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fedsparq", version, about = "Deterministic federated-learning simulator with adaptive sparse quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated experiment and write per-round records.
    Run {
        /// Flat `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// fedsparq|fedavg|quantonly|statictopk|randomk|fedpaq
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        rounds: Option<u32>,
        /// Output directory (default `runs`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convergence testbed on a synthetic strongly-convex quadratic.
    PlTestbed {
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 10.0)]
        cond: f64,
        /// fedavg (uncompressed) | fedsparq
        #[arg(long, default_value = "fedsparq")]
        strategy: String,
        #[arg(long, default_value_t = 400)]
        iterations: usize,
        /// Step size; defaults to 1/L.
        #[arg(long)]
        step: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Residual policy: fullef | quanterror
        #[arg(long, default_value = "fullef")]
        residual: String,
        /// Write the gap sequence as CSV under this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in property suites.
    Selftest,
}

fn cmd_run(
    config: Option<PathBuf>,
    seed: Option<u64>,
    strategy: Option<String>,
    rounds: Option<u32>,
    out: Option<PathBuf>,
) -> ExitCode {
    let mut cfg = match config {
        Some(path) => {
            let text = match std::fs::read_to_string(&path) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            };
            match ExperimentConfig::from_text(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            }
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(strategy) = strategy {
        if let Err(e) = cfg.set("strategy", &strategy) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    if let Some(rounds) = rounds {
        cfg.rounds = rounds;
    }
    if let Some(out) = out {
        cfg.out_dir = Some(out);
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }

    print!("{}", cfg.echo());
    let run = match harness::run_experiment(&cfg) {
        Ok(run) => run,
        Err(harness::ExperimentError::Config(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
        Err(harness::ExperimentError::Data(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    for r in &run.records {
        println!(
            "round {:>3}: acc {:6.2}%  loss {:.4}  bytes {:>12}  keep {:.4}",
            r.round, r.acc, r.loss, r.paper_bytes, r.keep_frac
        );
    }

    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let dataset = if matches!(cfg.dataset, harness::DatasetKind::Mnist) {
        "mnist"
    } else {
        "synthetic"
    };
    let partition = if matches!(cfg.partition, harness::PartitionKind::Iid) {
        "iid"
    } else {
        "dirichlet"
    };
    let stem = format!("{dataset}_{partition}_{}_seed{}", run.strategy_label, cfg.seed);
    match harness::write_run(&run, &dir, &stem) {
        Ok(csv) => println!("records written to {}", csv.display()),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    println!(
        "total upload: {} cost-model bytes, {} wire bytes; at-or-below-half-dense: {}",
        run.total_paper_bytes, run.total_wire_bytes, run.bytes_at_or_below_half_dense
    );
    if let Some(round) = run.diverged_at {
        println!("diverged at round {round}");
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

#[allow(clippy::too_many_arguments)]
fn cmd_pl(
    dim: usize,
    cond: f64,
    strategy: String,
    iterations: usize,
    step: Option<f64>,
    seed: u64,
    residual: String,
    out: Option<PathBuf>,
) -> ExitCode {
    let strategy = match strategy.as_str() {
        "fedavg" | "uncompressed" => PlStrategy::Uncompressed,
        "fedsparq" => PlStrategy::FedSparq,
        other => {
            eprintln!("error: unknown testbed strategy `{other}` (fedavg|fedsparq)");
            return ExitCode::from(2);
        }
    };
    let mut cfg = PlConfig::new(dim, cond, strategy);
    cfg.iterations = iterations;
    cfg.seed = seed;
    if let Some(step) = step {
        cfg.step = step;
    }
    cfg.residual = match residual.as_str() {
        "fullef" => fedsparq::compress::ResidualPolicy::FullEf,
        "quanterror" => fedsparq::compress::ResidualPolicy::QuantErrorOnly,
        other => {
            eprintln!("error: unknown residual policy `{other}` (fullef|quanterror)");
            return ExitCode::from(2);
        }
    };

    let report = match pl::run_pl_testbed(&cfg) {
        Ok(r) => r,
        Err(pl::PlError::Diverged { iteration }) => {
            eprintln!("error: diverged at iteration {iteration}");
            return ExitCode::from(1);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    println!("L = {}, mu = {}", report.l_const, report.mu_pl);
    println!(
        "fitted rate/iter = {:.6} (window {}..{}, r2 = {:.4})",
        report.fitted_rate, report.fit_window.0, report.fit_window.1, report.fit_r2
    );
    println!(
        "analytic descent rate = {:.6}",
        harness::PlReport::analytic_rate(cfg.step, report.mu_pl)
    );
    println!("plateau = {:.3e}", report.plateau);
    if let Some(dir) = out {
        if let Err(e) = std::fs::create_dir_all(&dir) {
            eprintln!("error: cannot create {}: {e}", dir.display());
            return ExitCode::from(2);
        }
        let path = dir.join(format!("pl_{}_seed{seed}.csv", heading(strategy)));
        let mut text = String::from("iteration,gap\n");
        for (t, gap) in report.gaps.iter().enumerate() {
            text.push_str(&format!("{t},{gap}\n"));
        }
        if let Err(e) = std::fs::write(&path, text) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return ExitCode::from(2);
        }
        println!("gap sequence written to {}", path.display());
    }
    ExitCode::SUCCESS
}

fn heading(strategy: PlStrategy) -> &'static str {
    match strategy {
        PlStrategy::Uncompressed => "fedavg",
        PlStrategy::FedSparq => "fedsparq",
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            strategy,
            rounds,
            out,
        } => cmd_run(config, seed, strategy, rounds, out),
        Command::PlTestbed {
            dim,
            cond,
            strategy,
            iterations,
            step,
            seed,
            residual,
            out,
        } => cmd_pl(dim, cond, strategy, iterations, step, seed, residual, out),
        Command::Selftest => {
            let failures = selftest::run_all();
            if failures == 0 {
                println!("all suites passed");
                ExitCode::SUCCESS
            } else {
                println!("{failures} suite(s) failed");
                ExitCode::from(1)
            }
        }
    }
}
