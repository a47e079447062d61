//! Shared harness for the two end-to-end criteria: builds the release
//! binary, generates the synthetic splits once, trains every arm, and caches
//! the parsed results for both tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use aehs_core::config::Config;
use aehs_core::envdata::{read_dataset, SepsisSimConfig};

pub const SEEDS: [u64; 5] = [101, 202, 303, 404, 505];

#[derive(Debug, Clone, Copy)]
pub struct FinalScore {
    pub point: f64,
    pub lower: f64,
}

#[derive(Debug)]
pub struct Experiment {
    /// R^μ of the held-out test split
    pub behavior_return: f64,
    pub aehs_finals: Vec<FinalScore>,
    /// first iteration after which the seed-averaged validation curve stays
    /// above the validation split's R^μ
    pub aehs_crossing: Option<usize>,
    pub a2c_crossing: Option<usize>,
    pub aehs_masked_mean: f64,
    pub mdp_masked_mean: f64,
    /// (N_s, final test score) on one fixed seed
    pub ns_finals: Vec<(usize, f64)>,
    pub cross_seed_std: f64,
    _dir: tempfile::TempDir,
}

pub fn release_binary() -> PathBuf {
    static BIN: OnceLock<PathBuf> = OnceLock::new();
    BIN.get_or_init(|| {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
        let status = Command::new("cargo")
            .args(["build", "--release", "-p", "aehs-cli"])
            .current_dir(&root)
            .status()
            .expect("cargo build");
        assert!(status.success(), "release build failed");
        root.join("target/release/aehs")
    })
    .clone()
}

pub fn run(bin: &Path, args: &[&str]) {
    let out = Command::new(bin).args(args).output().expect("spawn cli");
    assert!(
        out.status.success(),
        "cli {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn read_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
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

fn experiment_env() -> SepsisSimConfig {
    SepsisSimConfig {
        obs_dim: 48,
        missing_prob: 0.3,
        ..SepsisSimConfig::default()
    }
}

/// The desk-scale experiment profile: full 48-variable schema at 0.3
/// missingness, with network widths and episode counts reduced to fit the
/// runtime budget of a single CPU core.
pub fn experiment_config() -> Config {
    let mut cfg = small_config(experiment_env());
    cfg.train.epochs = 5;
    cfg
}

pub fn small_config(env: SepsisSimConfig) -> Config {
    let mut cfg = Config::default();
    cfg.model.obs_dim = env.obs_dim;
    cfg.model.h_dim = 12;
    cfg.model.z_dim = 8;
    cfg.model.belief_dim = 12;
    cfg.model.fc_dim = 12;
    cfg.model.act_enc_dim = 6;
    cfg.model.obs_enc_dim = 12;
    cfg.model.weight_feat_dim = 6;
    cfg.model.n_particles = 8;
    cfg.search.n_expansions = 5;
    cfg.search.n_trees = 1;
    cfg.search.n_z = 1;
    cfg.search.n_zo = 1;
    cfg.search.n_actions = 2;
    cfg.search.gamma = 0.95;
    cfg.advantage.gamma = 0.95;
    cfg.train.batch_len = 16;
    cfg.train.epochs = 1;
    cfg.train.learning_rate = 1e-3;
    cfg.train.eval_every = 4;
    cfg.oppe.n_bootstrap = 500;
    cfg.env = env;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &Config) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, toml::to_string(cfg).unwrap()).unwrap();
    path
}

/// oppe_score column as (iteration, score) pairs.
fn read_curve(dir: &Path) -> Vec<(usize, f64)> {
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let mut f = l.split(',');
            let it: usize = f.next()?.parse().ok()?;
            let score: f64 = f.nth(5)?.parse().ok()?;
            Some((it, score))
        })
        .collect()
}

fn read_final(dir: &Path) -> (FinalScore, f64) {
    let text = fs::read_to_string(dir.join("oppe.csv")).unwrap();
    let row: Vec<f64> = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    (FinalScore { point: row[0], lower: row[1] }, row[2])
}

/// First iteration after which every later point of the seed-averaged curve
/// exceeds `threshold`.
fn sustained_crossing(curves: &[Vec<(usize, f64)>], threshold: f64) -> Option<usize> {
    let grid: Vec<usize> = curves[0].iter().map(|&(it, _)| it).collect();
    let averaged: Vec<(usize, f64)> = grid
        .iter()
        .enumerate()
        .map(|(i, &it)| {
            (it, curves.iter().map(|c| c[i].1).sum::<f64>() / curves.len() as f64)
        })
        .collect();
    let mut crossing = None;
    for &(it, v) in &averaged {
        if v > threshold {
            crossing.get_or_insert(it);
        } else {
            crossing = None;
        }
    }
    crossing
}

pub fn experiment() -> &'static Experiment {
    static XP: OnceLock<Experiment> = OnceLock::new();
    XP.get_or_init(run_experiment)
}

fn run_experiment() -> Experiment {
    let bin = release_binary();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = experiment_config();
    let cfg_path = write_config(root, "experiment.toml", &cfg);
    let cfg_arg = cfg_path.to_str().unwrap();

    let data_dir = root.join("data");
    let dd = data_dir.to_str().unwrap();
    run(&bin, &["--seed", "1", "--config", cfg_arg, "--out-dir", dd,
        "generate-data", "--episodes", "200", "--output", "train.trajectories"]);
    let train = data_dir.join("train.trajectories");
    let train = train.to_str().unwrap();
    run(&bin, &["--seed", "2", "--config", cfg_arg, "--out-dir", dd,
        "generate-data", "--episodes", "100", "--id-offset", "100000",
        "--output", "test.trajectories", "--norm-from", train]);
    run(&bin, &["--seed", "3", "--config", cfg_arg, "--out-dir", dd,
        "generate-data", "--episodes", "50", "--id-offset", "200000",
        "--output", "val.trajectories", "--norm-from", train]);
    let test = data_dir.join("test.trajectories");
    let test = test.to_str().unwrap();
    let val = data_dir.join("val.trajectories");
    let val_r_mu = {
        let ds = read_dataset(&val).unwrap();
        ds.mean_return()
    };
    let val = val.to_str().unwrap();

    let train_arm = |variant: &str, seed: u64, extra: &[&str], tag: &str| -> PathBuf {
        let out = root.join(format!("{tag}-{seed}"));
        let mut args = vec![
            "--seed", Box::leak(seed.to_string().into_boxed_str()) as &str,
            "--config", cfg_arg, "--out-dir", out.to_str().unwrap(),
            "train", variant, "--data", train, "--val", val,
        ];
        args.extend_from_slice(extra);
        let owned: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        run(&bin, &refs);
        out
    };
    let evaluate = |ckpt_dir: &Path, seed: u64, variant: &str, extra: &[&str]| -> (FinalScore, f64) {
        let out = ckpt_dir.join("eval");
        let seed_s = seed.to_string();
        let ckpt = ckpt_dir.join("checkpoint-final.bin");
        let mut args: Vec<String> = [
            "--seed", &seed_s, "--config", cfg_arg, "--out-dir", out.to_str().unwrap(),
            "evaluate", "--checkpoint", ckpt.to_str().unwrap(),
            "--data", test, "--variant", variant,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        run(&bin, &refs);
        read_final(&out)
    };

    let mut aehs_finals = Vec::new();
    let mut aehs_curves = Vec::new();
    let mut a2c_curves = Vec::new();
    let mut behavior_return = 0.0;
    let mut aehs_dirs = Vec::new();
    for &seed in &SEEDS {
        let d = train_arm("aehs", seed, &[], "aehs");
        aehs_curves.push(read_curve(&d));
        let (f, r_mu) = evaluate(&d, seed, "aehs", &[]);
        behavior_return = r_mu;
        aehs_finals.push(f);
        aehs_dirs.push(d);

        let d = train_arm("ae-a2c", seed, &[], "a2c");
        a2c_curves.push(read_curve(&d));
    }
    let aehs_crossing = sustained_crossing(&aehs_curves, val_r_mu);
    let a2c_crossing = sustained_crossing(&a2c_curves, val_r_mu);

    let mut aehs_masked = Vec::new();
    let mut mdp_masked = Vec::new();
    for &seed in &SEEDS {
        let d = train_arm("aehs", seed, &["--keep-vars", "20"], "aehs-m20");
        aehs_masked.push(evaluate(&d, seed, "aehs", &["--keep-vars", "20"]).0.point);
        let d = train_arm("mdp", seed, &["--keep-vars", "20"], "mdp-m20");
        mdp_masked.push(evaluate(&d, seed, "mdp", &["--keep-vars", "20"]).0.point);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    // expansion-count sweep on the first seed; N_s = 5 reuses the main run
    let mut ns_finals = vec![(cfg.search.n_expansions, aehs_finals[0].point)];
    for n_s in [10usize, 20] {
        let mut c = cfg.clone();
        c.search.n_expansions = n_s;
        let p = write_config(root, &format!("ns{n_s}.toml"), &c);
        let out = root.join(format!("ns{n_s}-run"));
        run(&bin, &["--seed", "101", "--config", p.to_str().unwrap(),
            "--out-dir", out.to_str().unwrap(),
            "train", "aehs", "--data", train, "--val", val]);
        let eval_out = out.join("eval");
        let ckpt = out.join("checkpoint-final.bin");
        run(&bin, &["--seed", "101", "--config", p.to_str().unwrap(),
            "--out-dir", eval_out.to_str().unwrap(),
            "evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", test]);
        ns_finals.push((n_s, read_final(&eval_out).0.point));
    }

    let points: Vec<f64> = aehs_finals.iter().map(|f| f.point).collect();
    let m = mean(&points);
    let cross_seed_std = (points.iter().map(|p| (p - m).powi(2)).sum::<f64>()
        / (points.len() as f64 - 1.0))
        .sqrt();

    Experiment {
        behavior_return,
        aehs_finals,
        aehs_crossing,
        a2c_crossing,
        aehs_masked_mean: mean(&aehs_masked),
        mdp_masked_mean: mean(&mdp_masked),
        ns_finals,
        cross_seed_std,
        _dir: dir,
    }
}
