use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use relpose::scenario::ScenarioConfig;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "relpose", version, about = "Simulate and evaluate mutual relative pose estimation for robot teams")]
struct Cli {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Exit nonzero when any pose-graph solve fails to converge.
    #[arg(long, global = true)]
    strict: bool,
    /// Output directory (default: the scenario's `output`, else `out/<name>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scenario and write estimates, truth, metrics and a manifest.
    Run { config: PathBuf },
    /// Compare the filter Jacobians against central finite differences.
    CheckJacobians {
        #[arg(long, default_value_t = relpose::jaccheck::DEFAULT_STATES)]
        states: usize,
        #[arg(long, default_value_t = relpose::jaccheck::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Time raw pose, filter cycle and five-robot graph solve.
    Bench {
        #[arg(long, default_value_t = 1000)]
        reps: usize,
    },
    /// Write ground-truth poses and synthesized sensor streams only.
    ExportGt { config: PathBuf },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig> {
    let cfg = ScenarioConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn out_dir(cli_out: Option<PathBuf>, cfg: &ScenarioConfig) -> PathBuf {
    cli_out.or_else(|| cfg.output.as_ref().map(PathBuf::from)).unwrap_or_else(|| Path::new("out").join(&cfg.name))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { config } => {
            let cfg = load(&config, cli.seed)?;
            let dir = out_dir(cli.out, &cfg);
            let out = relpose::pipeline::run(&cfg)?;
            out.write(&dir).with_context(|| format!("writing {}", dir.display()))?;
            for m in &out.metrics.pairs {
                println!(
                    "{:>4} {}->{}  n={:<6} ate_pos={:.4} m  ate_rot={:.3} deg  median_pos={:.4} m  median_rot={:.3} deg",
                    m.estimator, m.observer, m.target, m.samples, m.ate_pos_m, m.ate_rot_deg, m.median_pos_m, m.median_rot_deg
                );
            }
            println!("wrote {}", dir.display());
            if cli.strict && out.stats.pgo_not_converged > 0 {
                bail!("{} of {} graph solves did not converge", out.stats.pgo_not_converged, out.stats.pgo_solves);
            }
        }
        Cmd::CheckJacobians { states, threshold } => {
            let r = relpose::jaccheck::check_jacobians(states, cli.seed.unwrap_or(1));
            println!("states={} F_x={:.3e} F_i={:.3e} H={:.3e} G={:.3e}", r.states, r.fx, r.fi, r.h, r.g);
            if !r.passes(threshold) {
                bail!("max relative error {:.3e} exceeds {threshold:.1e}", r.max_error());
            }
        }
        Cmd::Bench { reps } => {
            for t in relpose::bench::run_all(reps) {
                println!("{:<14} reps={} median={:.1} us p99={:.1} us", t.name, t.reps, t.median_us, t.p99_us);
            }
        }
        Cmd::ExportGt { config } => {
            let cfg = load(&config, cli.seed)?;
            let dir = out_dir(cli.out, &cfg);
            relpose::pipeline::export_ground_truth(&cfg, &dir)?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}
