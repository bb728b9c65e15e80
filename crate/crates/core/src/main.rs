use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stackrl::autodiff::Checkpoint;
use stackrl::config::{parse_config, Mode, TrainerConfig};
use stackrl::experiment::{export_curves, parse_seeds, train_seeds, with_mode};
use stackrl::tabular::{extract_equilibrium, instance::InstanceFile, value_iteration, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use stackrl::trainer::{evaluate, random_policy_returns, Agent};
use stackrl::verify::{run_suite, Suite};
use stackrl::Error;

#[derive(Parser)]
#[command(name = "stackrl", version, about = "Leader/follower perception-policy training and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and write metrics, checkpoints and a manifest.
    Train {
        /// Flat key = value config; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run count fanned out from the config seed, or a comma-separated seed list.
        #[arg(long, default_value = "1")]
        seeds: String,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Output root; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run randomized property suites against independent oracles.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate metrics files into (step, mean, std) curves per mode.
    ExportCurves {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the episode length stored in the checkpoint config.
        #[arg(long)]
        episode_cap: Option<usize>,
        /// Also score a uniform-random policy on the same episodes.
        #[arg(long)]
        random_baseline: bool,
    },
    /// Solve a tabular game instance and print its fixed point and equilibrium.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Usage(_) => 2,
        _ => 3,
    }
}

fn load_config(path: Option<&PathBuf>) -> stackrl::Result<TrainerConfig> {
    match path {
        Some(p) => parse_config(p),
        None => Ok(TrainerConfig::default()),
    }
}

fn run(cli: Cli) -> stackrl::Result<u8> {
    match cli.command {
        Command::Train { config, seeds, mode, out } => {
            let cfg = with_mode(&load_config(config.as_ref())?, mode);
            cfg.validate()?;
            let seeds = parse_seeds(&seeds, &cfg)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let manifest = train_seeds(&cfg, &seeds, &out)?;
            for r in &manifest.runs {
                println!("seed {}: {:?} {}", r.seed, r.status, r.directory.display());
            }
            let failures = manifest.failures();
            if let Some((seed, msg)) = failures.first() {
                eprintln!("run with seed {seed} failed: {msg}");
                return Ok(3);
            }
            Ok(0)
        }
        Command::Verify { suite, seed } => {
            let results = run_suite(suite, seed)?;
            let mut ok = true;
            for r in &results {
                println!("{r}");
                ok &= r.passed;
            }
            Ok(if ok { 0 } else { 1 })
        }
        Command::ExportCurves { out, metrics } => {
            let points = export_curves(&metrics, &out)?;
            println!("wrote {} rows to {}", points.len(), out.display());
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            episode_cap,
            random_baseline,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let result = evaluate(&ckpt, episodes, seed, episode_cap)?;
            println!(
                "greedy return over {episodes} episodes: mean {:.4}, std {:.4}, std error {:.4}",
                result.mean,
                result.std,
                result.std_error()
            );
            if random_baseline {
                let (_, mut cfg) = Agent::from_checkpoint(&ckpt)?;
                if let Some(cap) = episode_cap {
                    cfg.max_episode_length = cap;
                }
                let r = random_policy_returns(&cfg, episodes, seed)?;
                println!(
                    "random return over {episodes} episodes: mean {:.4}, std {:.4}, std error {:.4}",
                    r.mean,
                    r.std,
                    r.std_error()
                );
            }
            Ok(0)
        }
        Command::Solve { instance, tol } => {
            let game = InstanceFile::load(&instance)?.build()?;
            let vi = value_iteration(&game, tol, DEFAULT_MAX_ITERS)?;
            let eq = extract_equilibrium(&game, &vi.fixed_point, tol)?;
            println!("converged in {} iterations", vi.iterations);
            for s in 0..game.n_states() {
                println!("state {s}: values {:?}", vi.fixed_point.row(s));
            }
            println!("leader choice per (s, a): {:?}", eq.theta_star);
            println!("follower map per (s, a): {:?}", eq.phi_star);
            println!("greedy policy: {:?}", eq.greedy_policy);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
