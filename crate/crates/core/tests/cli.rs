use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stackrl::experiment::{aggregate_curves, export_curves, RunManifest, RunStatus, MANIFEST_FILE};
use stackrl::Error;

const TINY: &str = "
grid_height = 6
grid_width = 6
conv_channels = [2, 3, 2]
feature_dim = 6
policy_hidden = [8]
rollout_length = 128
batch_size = 32
total_timesteps = 256
max_episode_length = 40
eval_episodes = 2
";

fn stackrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stackrl")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn train(dir: &Path, cfg: &Path, out: &str, extra: &[&str]) -> RunManifest {
    let out = dir.join(out);
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = stackrl(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    RunManifest::load(&out.join(MANIFEST_FILE)).unwrap()
}

#[test]
fn train_writes_manifest_and_run_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 4\n");
    let m = train(dir.path(), &cfg, "out", &["--seeds", "2"]);
    assert_eq!(m.seeds, vec![4, 5]);
    for r in &m.runs {
        assert_eq!(r.status, RunStatus::Completed);
        let name = r.directory.file_name().unwrap().to_str().unwrap().to_string();
        assert!(name.starts_with("stackelberg-") && name.ends_with(&format!("-seed{}", r.seed)));
        assert!(r.directory.join("metrics.csv").exists());
        assert!(r.directory.join("final.ckpt.json").exists());
        assert!(r.directory.join("config.toml").exists());
    }
}

#[test]
fn repeated_training_gives_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = train(dir.path(), &cfg, "a", &["--seeds", "3", "--mode", "ppo_baseline"]);
    let b = train(dir.path(), &cfg, "b", &["--seeds", "3", "--mode", "ppo_baseline"]);
    let read = |m: &RunManifest| fs::read(m.runs[0].directory.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert!(a.runs[0].directory.file_name().unwrap().to_str().unwrap().starts_with("ppo_baseline-"));
}

#[test]
fn configuration_mistakes_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "gamma = 1.5\n");
    let o = stackrl(&["train", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma"));

    let typo = dir.path().join("typo.toml");
    fs::write(&typo, "learning_rat = 0.1\n").unwrap();
    assert_eq!(code(&stackrl(&["train", "--config", typo.to_str().unwrap()])), 2);

    let cfg = write_config(dir.path(), "");
    assert_eq!(code(&stackrl(&["train", "--config", cfg.to_str().unwrap(), "--seeds", "0"])), 2);
    assert_eq!(code(&stackrl(&["train", "--mode", "sideways"])), 2);
    assert_eq!(code(&stackrl(&["bogus"])), 2);
}

#[test]
fn runtime_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&stackrl(&["eval", "--checkpoint", missing.to_str().unwrap()])), 3);
    let empty = dir.path().join("metrics.csv");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("curves.csv");
    let o = stackrl(&["export-curves", "--out", out.to_str().unwrap(), empty.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn verify_suites_pass() {
    for suite in ["tabular", "gae"] {
        let o = stackrl(&["verify", "--suite", suite, "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    }
}

#[test]
fn eval_and_solve_print_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let m = train(dir.path(), &cfg, "out", &[]);
    let ckpt = m.runs[0].directory.join("final.ckpt.json");
    let o = stackrl(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "3", "--random-baseline"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("greedy return over 3 episodes") && text.contains("random return"));
    let again = stackrl(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "3", "--random-baseline"]);
    assert_eq!(o.stdout, again.stdout);

    let inst = dir.path().join("game.toml");
    fs::write(
        &inst,
        "n_states = 1\nn_actions = 1\ngamma = 0.5\nlambda_cost = 0.0\ntheta_grid = 1\n\
         transition = [1.0]\nreward = [1.0]\ncost = [0.0]\nphi_grid = \"all\"\n",
    )
    .unwrap();
    let o = stackrl(&["solve", "--instance", inst.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("converged") && text.contains("greedy policy: [0]"));
}

fn write_metrics(dir: &Path, name: &str, mode: &str, rows: &[(usize, f64)]) -> PathBuf {
    let run = dir.join(name);
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join("config.toml"), format!("mode = \"{mode}\"\n")).unwrap();
    let header = "iteration,env_steps,mean_episode_return,leader_utility,u_policy,raw_cost,weighted_cost,\
                  clip_loss,value_loss,entropy,leader_grad_norm,follower_grad_norm";
    let mut text = format!("{header}\n");
    for (i, (step, ret)) in rows.iter().enumerate() {
        text += &format!("{i},{step},{ret},0,0,0,0,0,0,0,0,0\n");
    }
    let p = run.join("metrics.csv");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn single_seed_curve_has_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_metrics(dir.path(), "a", "stackelberg", &[(128, 1.0), (256, 2.5)]);
    let pts = aggregate_curves(&[p]).unwrap();
    assert_eq!(pts.len(), 2);
    assert!(pts.iter().all(|c| c.std_return == 0.0 && c.seeds == 1));
    assert_eq!(pts[1].mean_return, 2.5);
}

#[test]
fn curves_group_by_mode_and_average_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let paths = vec![
        write_metrics(dir.path(), "s1", "stackelberg", &[(10, 1.0), (20, 3.0)]),
        write_metrics(dir.path(), "s2", "stackelberg", &[(10, 3.0), (20, 5.0)]),
        write_metrics(dir.path(), "b1", "ppo_baseline", &[(10, -1.0), (20, 0.0)]),
    ];
    let out = dir.path().join("curves.csv");
    let pts = export_curves(&paths, &out).unwrap();
    let sk: Vec<_> = pts.iter().filter(|p| p.mode == "stackelberg").collect();
    assert_eq!((sk[0].mean_return, sk[0].std_return), (2.0, 1.0));
    assert_eq!((sk[1].mean_return, sk[1].std_return), (4.0, 1.0));
    assert_eq!(pts.iter().filter(|p| p.mode == "ppo_baseline").count(), 2);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "mode,env_steps,mean_return,std_return,seeds");
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn misaligned_or_empty_metrics_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_metrics(dir.path(), "a", "stackelberg", &[(10, 1.0), (20, 3.0)]);
    let b = write_metrics(dir.path(), "b", "stackelberg", &[(10, 1.0), (30, 3.0)]);
    assert!(matches!(aggregate_curves(&[a.clone(), b]), Err(Error::Alignment(_))));
    let e = write_metrics(dir.path(), "e", "stackelberg", &[]);
    assert!(matches!(aggregate_curves(&[a, e]), Err(Error::Alignment(_))));
    assert!(matches!(aggregate_curves(&[]), Err(Error::Usage(_))));
}
