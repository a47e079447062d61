use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aehs"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        r#"
[model]
obs_dim = 6
h_dim = 8
z_dim = 4
belief_dim = 8
fc_dim = 8
act_enc_dim = 4
obs_enc_dim = 6
weight_feat_dim = 4
n_particles = 5

[search]
n_expansions = 2
n_trees = 2
n_z = 1
n_zo = 1
n_actions = 2

[train]
batch_len = 8
epochs = 1
eval_every = 2

[oppe]
n_bootstrap = 100

[env]
obs_dim = 6
n_binary = 1
latent_dim = 3
max_horizon = 6
missing_prob = 0.2
"#,
    )
    .unwrap();
    path
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn unknown_arguments_exit_nonzero_with_usage() {
    let out = bin().arg("--no-such-flag").output().unwrap();
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.to_lowercase().contains("usage"), "no usage text: {text}");
    let out = bin().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn pipeline_runs_and_repeated_invocations_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let data_dir = tmp.path().join("data");
    run_ok(&[
        "--seed", "11", "--config", cfg,
        "--out-dir", data_dir.to_str().unwrap(),
        "generate-data", "--episodes", "10", "--output", "train.trajectories",
    ]);
    let data = data_dir.join("train.trajectories");
    let data = data.to_str().unwrap();

    for (i, variant) in ["aehs", "ae-a2c", "mdp"].iter().enumerate() {
        let run_a = tmp.path().join(format!("run{i}a"));
        let run_b = tmp.path().join(format!("run{i}b"));
        for dir in [&run_a, &run_b] {
            run_ok(&[
                "--seed", "7", "--config", cfg,
                "--out-dir", dir.to_str().unwrap(),
                "train", variant, "--data", data, "--val", data,
            ]);
        }
        assert_eq!(
            read_dir_files(&run_a),
            read_dir_files(&run_b),
            "{variant} training output differs between identical invocations"
        );
        let metrics = fs::read_to_string(run_a.join("metrics.csv")).unwrap();
        assert!(metrics.starts_with(
            "iteration,elbo,value_loss,policy_loss,entropy,behavior_loss,oppe_score"
        ));
        assert!(metrics.lines().count() > 1);

        let ckpt = run_a.join("checkpoint-final.bin");
        let eval_a = tmp.path().join(format!("eval{i}a"));
        let eval_b = tmp.path().join(format!("eval{i}b"));
        for dir in [&eval_a, &eval_b] {
            run_ok(&[
                "--seed", "3", "--config", cfg,
                "--out-dir", dir.to_str().unwrap(),
                "evaluate", "--checkpoint", ckpt.to_str().unwrap(),
                "--data", data, "--variant", variant,
            ]);
        }
        assert_eq!(read_dir_files(&eval_a), read_dir_files(&eval_b));
        let oppe = fs::read_to_string(eval_a.join("oppe.csv")).unwrap();
        let row = oppe.lines().nth(1).unwrap();
        let fields: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert!(fields.iter().all(|v| v.is_finite()), "non-finite oppe row: {row}");
        assert!(eval_a.join("histogram.csv").exists());
        assert!(eval_a.join("manifest.txt").exists());
    }
}

#[test]
fn evaluate_on_untrained_checkpoint_reports_finite_score() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let data_dir = tmp.path().join("data");
    run_ok(&[
        "--seed", "5", "--config", cfg,
        "--out-dir", data_dir.to_str().unwrap(),
        "generate-data", "--episodes", "6",
    ]);
    let data = data_dir.join("data.trajectories");

    // freshly initialized parameters, never touched by the optimizer
    let stack = aehs_core::agent::trainer::AehsStack::new(
        &aehs_core::Config::load(Path::new(cfg)).unwrap(),
        5,
    );
    let ckpt = tmp.path().join("untrained.bin");
    aehs_core::diffcore::checkpoint::save(&ckpt, &stack.params, None).unwrap();
    let eval = tmp.path().join("eval");
    run_ok(&[
        "--seed", "5", "--config", cfg,
        "--out-dir", eval.to_str().unwrap(),
        "evaluate", "--checkpoint", ckpt.to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--oracle-behavior",
    ]);
    let oppe = fs::read_to_string(eval.join("oppe.csv")).unwrap();
    let point: f64 = oppe.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    assert!(point.is_finite());
}

#[test]
fn inspect_prints_filter_and_tree_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let data_dir = tmp.path().join("data");
    run_ok(&[
        "--seed", "2", "--config", cfg,
        "--out-dir", data_dir.to_str().unwrap(),
        "generate-data", "--episodes", "3",
    ]);
    let data = data_dir.join("data.trajectories");
    let run = tmp.path().join("run");
    run_ok(&[
        "--seed", "2", "--config", cfg,
        "--out-dir", run.to_str().unwrap(),
        "train", "aehs", "--data", data.to_str().unwrap(),
    ]);
    let out = bin()
        .args([
            "--seed", "2", "--config", cfg,
            "--out-dir", tmp.path().join("ins").to_str().unwrap(),
            "inspect", "--checkpoint", run.join("checkpoint-final.bin").to_str().unwrap(),
            "--data", data.to_str().unwrap(), "--steps", "2", "--tree",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("particle 0 logw"));
    assert!(text.contains("node 0 depth 0"));
}

#[test]
fn masking_restricts_observed_variables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let data_dir = tmp.path().join("data");
    run_ok(&[
        "--seed", "4", "--config", cfg,
        "--out-dir", data_dir.to_str().unwrap(),
        "generate-data", "--episodes", "4",
    ]);
    let data = data_dir.join("data.trajectories");
    let run = tmp.path().join("run");
    run_ok(&[
        "--seed", "4", "--config", cfg,
        "--out-dir", run.to_str().unwrap(),
        "train", "aehs", "--data", data.to_str().unwrap(), "--keep-vars", "3",
    ]);
    assert!(run.join("checkpoint-final.bin").exists());
}
