//! Command-line front end: dataset generation, the three training variants,
//! off-policy evaluation of a checkpoint, and debug inspection of filter and
//! tree state. Every run writes a `manifest.txt` (config hash, seed, code
//! version) beside its outputs so results can be traced to their inputs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use aehs_core::agent::trainer::{
    evaluate_mdp_oppe, evaluate_pomdp_oppe, train_aehs, train_ae_a2c, train_mdp_baseline,
    AehsStack, MdpStack, MetricsRow, TrainResult,
};
use aehs_core::belief::{init_belief, update_belief, BeliefFilter};
use aehs_core::diffcore::checkpoint;
use aehs_core::envdata::{
    generate_dataset, interpolate_for_mdp, mask_variables, observed_means, read_dataset,
    variable_selection_order, write_dataset, BehaviorPolicy, Dataset, SepsisSim,
};
use aehs_core::genmodel::Diagnostics;
use aehs_core::oppe::{behavior_return, bootstrap_bound, histogram, wis_return};
use aehs_core::treesearch::{build_tree, PomdpBackend};
use aehs_core::{Config, CoreError};

#[derive(Parser)]
#[command(name = "aehs", version, about = "offline belief-state RL engine")]
struct Cli {
    /// master random seed for the whole invocation
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML configuration file; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// directory for all output files
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Aehs,
    AeA2c,
    Mdp,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the behavior policy in the simulator and write a trajectory file
    GenerateData {
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// first episode id, so separate invocations can produce disjoint splits
        #[arg(long, default_value_t = 0)]
        id_offset: u64,
        /// output file name inside the output directory
        #[arg(long, default_value = "data.trajectories")]
        output: String,
        /// reuse normalization statistics from an existing trajectory file
        /// (generate the training split first, then point test splits here)
        #[arg(long)]
        norm_from: Option<PathBuf>,
    },
    /// Fit an agent on a trajectory file; writes metrics.csv and checkpoints
    Train {
        #[arg(value_enum)]
        variant: Variant,
        #[arg(long)]
        data: PathBuf,
        /// held-out split scored with weighted importance sampling during training
        #[arg(long)]
        val: Option<PathBuf>,
        /// restrict observations to the first N variables of the fixed
        /// selection order (the rest stay in place, masked out)
        #[arg(long)]
        keep_vars: Option<usize>,
    },
    /// Off-policy evaluation of a checkpoint on a trajectory file
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Variant::Aehs)]
        variant: Variant,
        /// score against the recorded true behavior log-densities instead of
        /// the learned behavior head
        #[arg(long)]
        oracle_behavior: bool,
        #[arg(long, default_value_t = 30)]
        bins: usize,
        #[arg(long)]
        keep_vars: Option<usize>,
    },
    /// Dump particle-filter state and a search-tree trace for one episode
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        /// number of filter updates to trace
        #[arg(long, default_value_t = 3)]
        steps: usize,
        /// also build and print one search tree from the final belief
        #[arg(long)]
        tree: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    fs::create_dir_all(&cli.out_dir)?;
    write_manifest(&cli.out_dir, &cfg, cli.seed)?;
    match &cli.command {
        Command::GenerateData { episodes, id_offset, output, norm_from } => {
            cmd_generate(cli, &cfg, *episodes, *id_offset, output, norm_from.as_deref())
        }
        Command::Train { variant, data, val, keep_vars } => {
            cmd_train(cli, &cfg, *variant, data, val.as_deref(), *keep_vars)
        }
        Command::Evaluate { checkpoint, data, variant, oracle_behavior, bins, keep_vars } => {
            cmd_evaluate(cli, &cfg, checkpoint, data, *variant, *oracle_behavior, *bins, *keep_vars)
        }
        Command::Inspect { checkpoint, data, episode, steps, tree } => {
            cmd_inspect(cli, &cfg, checkpoint, data, *episode, *steps, *tree)
        }
    }
}

fn write_manifest(dir: &Path, cfg: &Config, seed: u64) -> Result<(), Box<dyn std::error::Error>> {
    let serialized = toml::to_string(cfg)?;
    let hash = Sha256::digest(serialized.as_bytes());
    let mut out = String::new();
    out.push_str(&format!("config_sha256 {hash:x}\n"));
    out.push_str(&format!("seed {seed}\n"));
    out.push_str(&format!("version {}\n", env!("CARGO_PKG_VERSION")));
    fs::write(dir.join("manifest.txt"), out)?;
    Ok(())
}

fn cmd_generate(
    cli: &Cli,
    cfg: &Config,
    episodes: usize,
    id_offset: u64,
    output: &str,
    norm_from: Option<&Path>,
) -> Result<(), Box<dyn std::error::Error>> {
    let sim = SepsisSim::new(cfg.env.clone())?;
    let policy = BehaviorPolicy::from_config(&sim.cfg);
    let mut ds = generate_dataset(&sim, &policy, episodes, id_offset, cli.seed);
    let stats = match norm_from {
        Some(p) => read_dataset(p)?
            .header
            .normalization
            .ok_or_else(|| CoreError::Config(format!("{} carries no normalization", p.display())))?,
        None => aehs_core::envdata::compute_norm_stats(&ds),
    };
    aehs_core::envdata::normalize_and_dilate(&mut ds, &stats)?;
    let path = cli.out_dir.join(output);
    write_dataset(&ds, &path)?;
    println!(
        "wrote {} episodes / {} transitions to {}",
        ds.trajectories.len(),
        ds.n_transitions(),
        path.display()
    );
    Ok(())
}

/// Loads a trajectory file and applies the run's view of it: optional
/// variable masking and, for the baseline, interpolation of missing entries.
fn load_prepared(
    path: &Path,
    keep_vars: Option<usize>,
    densify: bool,
) -> Result<Dataset, Box<dyn std::error::Error>> {
    let mut ds = read_dataset(path)?;
    if let Some(n) = keep_vars {
        let order = variable_selection_order(ds.header.obs_dim());
        let keep: Vec<usize> = order.into_iter().take(n).collect();
        mask_variables(&mut ds, &keep, false)?;
    }
    if densify {
        let means = observed_means(&ds);
        interpolate_for_mdp(&mut ds, &means)?;
    }
    Ok(ds)
}

fn write_metrics(dir: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    let mut f = fs::File::create(dir.join("metrics.csv"))?;
    writeln!(
        f,
        "iteration,elbo,value_loss,policy_loss,entropy,behavior_loss,oppe_score"
    )?;
    for r in rows {
        let score = r.oppe_score.map(|s| s.to_string()).unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.iteration, r.elbo, r.value_loss, r.policy_loss, r.entropy, r.behavior_loss, score
        )?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cli: &Cli,
    cfg: &Config,
    variant: Variant,
    data: &Path,
    val: Option<&Path>,
    keep_vars: Option<usize>,
) -> Result<(), Box<dyn std::error::Error>> {
    let densify = variant == Variant::Mdp;
    let train_ds = load_prepared(data, keep_vars, densify)?;
    let val_ds = val
        .map(|p| load_prepared(p, keep_vars, densify))
        .transpose()?;
    let result: TrainResult = match variant {
        Variant::Aehs => {
            let mut stack = AehsStack::new(cfg, cli.seed);
            train_aehs(&mut stack, &train_ds, val_ds.as_ref(), cfg, cli.seed, Some(&cli.out_dir))?
        }
        Variant::AeA2c => {
            let mut stack = AehsStack::new(cfg, cli.seed);
            train_ae_a2c(&mut stack, &train_ds, val_ds.as_ref(), cfg, cli.seed, Some(&cli.out_dir))?
        }
        Variant::Mdp => {
            let mut stack = MdpStack::new(cfg, cli.seed);
            train_mdp_baseline(&mut stack, &train_ds, val_ds.as_ref(), cfg, cli.seed, Some(&cli.out_dir))?
        }
    };
    write_metrics(&cli.out_dir, &result.metrics)?;
    println!(
        "trained {} iterations; diagnostics: {:?}",
        result.iterations, result.diagnostics
    );
    Ok(())
}

fn load_params_into<F>(path: &Path, build: F) -> Result<aehs_core::diffcore::ParameterSet, Box<dyn std::error::Error>>
where
    F: FnOnce() -> aehs_core::diffcore::ParameterSet,
{
    let (loaded, _) = checkpoint::load(path)?;
    let expected = build();
    if loaded.tensors.len() != expected.tensors.len()
        || loaded
            .tensors
            .iter()
            .zip(&expected.tensors)
            .any(|(a, b)| a.value.shape != b.value.shape)
    {
        return Err(Box::new(CoreError::SchemaMismatch(
            "checkpoint shapes do not match the configured model".into(),
        )));
    }
    Ok(loaded)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    cli: &Cli,
    cfg: &Config,
    ckpt: &Path,
    data: &Path,
    variant: Variant,
    oracle_behavior: bool,
    bins: usize,
    keep_vars: Option<usize>,
) -> Result<(), Box<dyn std::error::Error>> {
    let densify = variant == Variant::Mdp;
    let ds = load_prepared(data, keep_vars, densify)?;
    let evals = match variant {
        Variant::Aehs | Variant::AeA2c => {
            let mut stack = AehsStack::new(cfg, cli.seed);
            stack.params = load_params_into(ckpt, || AehsStack::new(cfg, cli.seed).params)?;
            evaluate_pomdp_oppe(&stack, &ds, cfg, cli.seed, !oracle_behavior)?
        }
        Variant::Mdp => {
            let mut stack = MdpStack::new(cfg, cli.seed);
            stack.params = load_params_into(ckpt, || MdpStack::new(cfg, cli.seed).params)?;
            evaluate_mdp_oppe(&stack, &ds, !oracle_behavior)?
        }
    };
    let point = wis_return(&evals, &cfg.oppe)?;
    let boot = bootstrap_bound(&evals, &cfg.oppe, cli.seed)?;
    let r_mu = behavior_return(&evals);
    let mut f = fs::File::create(cli.out_dir.join("oppe.csv"))?;
    writeln!(f, "point_estimate,lower_bound,behavior_return,n_trajectories")?;
    writeln!(f, "{},{},{},{}", point, boot.lower_bound, r_mu, evals.len())?;
    let mut h = fs::File::create(cli.out_dir.join("histogram.csv"))?;
    writeln!(h, "bin_lo,bin_hi,count")?;
    for (lo, hi, count) in histogram(&boot.estimates, bins.max(1)) {
        writeln!(h, "{lo},{hi},{count}")?;
    }
    println!(
        "wis {point:.6} lower_bound {:.6} behavior {r_mu:.6} over {} trajectories",
        boot.lower_bound,
        evals.len()
    );
    Ok(())
}

fn cmd_inspect(
    cli: &Cli,
    cfg: &Config,
    ckpt: &Path,
    data: &Path,
    episode: usize,
    steps: usize,
    tree: bool,
) -> Result<(), Box<dyn std::error::Error>> {
    let ds = load_prepared(data, None, false)?;
    let ep = ds
        .trajectories
        .get(episode)
        .ok_or_else(|| CoreError::Config(format!("no episode at index {episode}")))?;
    let mut stack = AehsStack::new(cfg, cli.seed);
    stack.params = load_params_into(ckpt, || AehsStack::new(cfg, cli.seed).params)?;
    let mut tape = aehs_core::diffcore::Tape::new(false);
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let mut diag = Diagnostics::default();
    let first = &ep.steps[0];
    let (mut filter, _): (BeliefFilter, _) = init_belief(
        &mut tape,
        &stack.model,
        &stack.encoder,
        &stack.params,
        stack.n_particles,
        &first.obs,
        &first.mask,
        &mut rng,
        &mut diag,
    )?;
    println!("episode {} step 0 (init)", ep.episode_id);
    print!("{}", filter.dump(&tape));
    for (k, record) in ep.steps.iter().enumerate().skip(1).take(steps) {
        let (next, _) = update_belief(
            &mut tape,
            &filter,
            &stack.model,
            &stack.encoder,
            &stack.params,
            &record.action,
            &record.obs,
            &record.mask,
            &mut rng,
            &mut diag,
        )?;
        filter = next;
        println!("episode {} step {k}", ep.episode_id);
        print!("{}", filter.dump(&tape));
        if record.terminal != aehs_core::envdata::Terminal::None {
            break;
        }
    }
    if tree {
        let backend = PomdpBackend {
            model: &stack.model,
            encoder: &stack.encoder,
            aggregation: &stack.aggregation,
            heads: &stack.heads,
            params: &stack.params,
        };
        let root = filter.snapshot(&tape);
        let (t, value) = build_tree(&backend, root, &cfg.search, &mut rng, &mut diag)?;
        println!("tree value {value:.6}");
        print!("{}", t.trace());
    }
    println!("diagnostics: {diag:?}");
    Ok(())
}
