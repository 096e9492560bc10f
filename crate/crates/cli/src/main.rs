mod manifest;
mod plot;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use skill_dt::checkpoint;
use skill_dt::env::{generate_dataset, make_env, Env, GeneratorConfig};
use skill_dt::evaluator::{evaluate_all_skills, mean_std};
use skill_dt::sdt;
use skill_dt::smm::{reconstruct, trajectory_states};
use skill_dt::trainer::{config_map, run, ActionBounds, FitHooks, TrainConfig, TrainState};
use skill_dt::trajectory::{dataset_stats, Dataset};

use manifest::{beside, RunManifest};
use plot::Series;

/// Bad flags or inputs that exist only in the user's head: exit code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<skill_dt::Error>() {
        Some(skill_dt::Error::Config(_) | skill_dt::Error::Argument(_)) => 2,
        _ => 1,
    }
}

#[derive(Parser)]
#[command(name = "skill-dt", version, about = "Unsupervised skill discovery with a skill-conditioned decision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scripted multimodal dataset (.sdt).
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Roll out every skill and write a per-skill CSV.
    Eval(EvalArgs),
    /// Reconstruct a target trajectory from its skill sequence.
    Reconstruct(ReconstructArgs),
    /// Train and evaluate over a list of skill counts.
    Ablate(AblateArgs),
    /// Print dataset statistics as JSON.
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// pointmaze, pointmaze-open or line.
    #[arg(long, default_value = "pointmaze")]
    env: String,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    modes: u64,
    /// Number of trajectories.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    /// Standard deviation of the Gaussian action noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Training hyperparameters. Precedence, lowest first: defaults (or `--toy`),
/// `--config`, individual flags, `--set`.
#[derive(Args)]
struct ModelArgs {
    /// Flat JSON object or `key = value` lines.
    #[arg(long, conflicts_with = "toy")]
    config: Option<PathBuf>,
    /// Start from the small preset that trains on one core in seconds.
    #[arg(long)]
    toy: bool,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Context length K.
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Gradient updates per relabelling pass (J).
    #[arg(long)]
    updates_per_iteration: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    grad_norm_clip: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    num_skills: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, e.g. `--set quantizer=kmeans`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match (&self.config, self.toy) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
                TrainConfig::parse(&text)?
            }
            (None, true) => TrainConfig::toy(),
            (None, false) => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        apply!(
            n_layers,
            n_heads,
            embed_dim,
            context_len,
            dropout,
            batch_size,
            updates_per_iteration,
            learning_rate,
            grad_norm_clip,
            iterations,
            num_skills,
            seed
        );
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether anything besides `--iterations` was given.
    fn changes_model(&self) -> bool {
        let flags = [
            self.n_layers.is_some(),
            self.n_heads.is_some(),
            self.embed_dim.is_some(),
            self.context_len.is_some(),
            self.dropout.is_some(),
            self.batch_size.is_some(),
            self.updates_per_iteration.is_some(),
            self.learning_rate.is_some(),
            self.grad_norm_clip.is_some(),
            self.num_skills.is_some(),
            self.seed.is_some(),
        ];
        self.config.is_some() || self.toy || !self.set.is_empty() || flags.iter().any(|&f| f)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset (.sdt).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Environment the data came from. Defaults to the dataset name when it
    /// is a known environment.
    #[arg(long)]
    env: Option<String>,
    /// Continue from this checkpoint; only `--iterations` may change.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-iteration report CSV.
    #[arg(long)]
    reports: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the environment recorded in the checkpoint.
    #[arg(long)]
    env: Option<String>,
    /// Environment seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    seeds: Vec<u64>,
    /// Defaults to the environment's episode length.
    #[arg(long)]
    max_steps: Option<usize>,
    /// CSV with columns skill_id, seed, return, steps.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("target_source").required(true).args(["target", "data"]))]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    env: Option<String>,
    /// CSV of target states, one per row, optional header.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Take the target from this dataset instead.
    #[arg(long, requires = "trajectory")]
    data: Option<PathBuf>,
    /// Trajectory index within `--data`.
    #[arg(long)]
    trajectory: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to the longer of the target and the environment's episode.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Directory for trajectory.csv, histogram.csv, report.json and plots.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    env: Option<String>,
    /// Skill counts to sweep, comma separated.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    skills: Vec<String>,
    /// Training seeds per skill count.
    #[arg(long = "train-seeds", value_delimiter = ',', default_value = "0,1,2")]
    train_seeds: Vec<u64>,
    #[arg(long = "eval-seeds", value_delimiter = ',', default_value = "0,1,2,3")]
    eval_seeds: Vec<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// CSV with one row per skill count.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    require_file(path, "dataset")?;
    sdt::load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<TrainState> {
    require_file(path, "checkpoint")?;
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Explicit `--env`, else `fallback` when it names a known environment.
fn resolve_env(explicit: Option<&str>, fallback: Option<&str>) -> Result<Option<Box<dyn Env>>> {
    match (explicit, fallback) {
        (Some(name), _) => Ok(Some(make_env(name)?)),
        (None, Some(name)) => Ok(make_env(name).ok()),
        (None, None) => Ok(None),
    }
}

fn require_env(explicit: Option<&str>, fallback: Option<&str>) -> Result<Box<dyn Env>> {
    resolve_env(explicit, fallback)?.ok_or_else(|| usage("no environment recorded; pass --env"))
}

fn bounds_for(env: Option<&dyn Env>, ds: &Dataset) -> ActionBounds {
    match env {
        Some(e) => ActionBounds { low: e.spec().action_low.clone(), high: e.spec().action_high.clone() },
        None => ActionBounds::from_dataset(ds),
    }
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let started = manifest::now();
    let env = make_env(&a.env)?;
    let cfg = GeneratorConfig {
        modes: a.modes as usize,
        num_trajectories: a.count as usize,
        noise_std: a.noise,
        seed: a.seed,
        ..GeneratorConfig::default()
    };
    let ds = generate_dataset(env.as_ref(), &cfg)?;
    create_parent(&a.out)?;
    sdt::save_dataset(&ds, &a.out)?;
    let m = RunManifest::new("gen-data", json!({ "env": a.env, "generator": cfg }), started)
        .dataset(&a.out)?
        .seeds(&[a.seed])
        .output(&a.out);
    let hash = m.dataset_sha256.clone().unwrap_or_default();
    m.write(&beside(&a.out))?;
    println!("{} trajectories -> {} (sha256 {hash})", ds.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let started = manifest::now();
    let ds = load_data(&a.data)?;
    let mut state = match &a.resume {
        Some(path) => {
            if a.model.changes_model() {
                return Err(usage("only --iterations may be given with --resume"));
            }
            let mut st = load_checkpoint(path)?;
            if let Some(it) = a.model.iterations {
                st.config.iterations = it;
            }
            st
        }
        None => {
            let cfg = a.model.resolve()?;
            let env = resolve_env(a.env.as_deref(), Some(&ds.name))?;
            let mut st = TrainState::init(&cfg, &ds, &bounds_for(env.as_deref(), &ds))?;
            st.env = env.map(|e| e.spec().name.clone());
            st
        }
    };
    create_parent(&a.out)?;
    let total = state.config.iterations;
    let mut reports = Vec::new();
    run(
        &mut state,
        &ds,
        &mut FitHooks {
            checkpoint: Some(a.out.clone()),
            on_iteration: Some(Box::new(|r| {
                log::info!(
                    "iteration {}/{total}: loss {:.5} (action {:.5}, vq {:.5}), {} codes in use",
                    r.iteration,
                    r.mean_loss,
                    r.mean_action_loss,
                    r.mean_vq_loss,
                    r.codes_in_use
                );
                reports.push(r.clone());
            })),
            ..FitHooks::default()
        },
    )?;
    let mut m = RunManifest::new("train", serde_json::to_value(config_map(&state.config))?, started)
        .dataset(&a.data)?
        .seeds(&[state.config.seed])
        .output(&a.out);
    m.checkpoint = Some(a.out.display().to_string());
    m.checkpoint_sha256 = Some(manifest::sha256_file(&a.out)?);
    if let Some(path) = &a.reports {
        create_parent(path)?;
        let mut csv = String::from("iteration,mean_loss,mean_action_loss,mean_vq_loss,mean_grad_norm,codes_in_use\n");
        for r in &state.reports {
            csv += &format!(
                "{},{},{},{},{},{}\n",
                r.iteration, r.mean_loss, r.mean_action_loss, r.mean_vq_loss, r.mean_grad_norm, r.codes_in_use
            );
        }
        fs::write(path, csv)?;
        m = m.output(path);
    }
    m.write(&beside(&a.out))?;
    match state.reports.last() {
        Some(r) => println!(
            "trained {} iterations ({} this run), final loss {:.5} -> {}",
            state.iteration,
            reports.len(),
            r.mean_loss,
            a.out.display()
        ),
        None => println!("wrote untrained checkpoint -> {}", a.out.display()),
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let started = manifest::now();
    let state = load_checkpoint(&a.checkpoint)?;
    let env = require_env(a.env.as_deref(), state.env.as_deref())?;
    if a.seeds.is_empty() {
        return Err(usage("--seeds must list at least one seed"));
    }
    let steps = a.max_steps.unwrap_or(env.spec().max_episode_steps);
    let ev = evaluate_all_skills(&state.agent(), env.as_ref(), &a.seeds, steps)?;
    let mut csv = String::from("skill_id,seed,return,steps\n");
    for r in &ev.records {
        csv += &format!("{},{},{},{}\n", r.skill_id.unwrap_or(0), r.env_seed, r.total_reward, r.steps);
    }
    // Summary row: the best skill's id and mean return.
    csv += &format!("best,all,{},\n", ev.best_return);
    create_parent(&a.out)?;
    fs::write(&a.out, csv)?;
    RunManifest::new(
        "eval",
        json!({ "env": env.spec().name, "max_steps": steps, "train": config_map(&state.config) }),
        started,
    )
    .checkpoint(&a.checkpoint)?
    .seeds(&a.seeds)
    .output(&a.out)
    .write(&beside(&a.out))?;
    for s in &ev.skills {
        println!("skill {:>3}: return {:>10.3} +- {:.3}", s.skill_id, s.mean_return, s.std_return);
    }
    println!("best skill {} with mean return {:.3}", ev.best_skill, ev.best_return);
    Ok(())
}

/// Parses one state per non-empty line; a first line that is not numeric is
/// taken as a header.
fn read_target(path: &Path, state_dim: usize) -> Result<Vec<Vec<f64>>> {
    require_file(path, "target")?;
    let text = fs::read_to_string(path)?;
    let mut states = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) if row.len() == state_dim && row.iter().all(|v| v.is_finite()) => states.push(row),
            Err(_) if n == 0 => continue,
            _ => {
                return Err(skill_dt::Error::Format(format!(
                    "{} line {}: expected {state_dim} finite numbers",
                    path.display(),
                    n + 1
                ))
                .into())
            }
        }
    }
    Ok(states)
}

fn axis_names(dim: usize) -> Vec<String> {
    match dim {
        1 => vec!["x".into()],
        2 => vec!["x".into(), "y".into()],
        _ => (0..dim).map(|i| format!("s{i}")).collect(),
    }
}

/// Planar view of a state path: (x, y) in 2D and above, (step, x) in 1D.
fn planar(states: &[Vec<f64>]) -> Vec<[f64; 2]> {
    states
        .iter()
        .enumerate()
        .map(|(t, s)| if s.len() >= 2 { [s[0], s[1]] } else { [t as f64, s[0]] })
        .collect()
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let started = manifest::now();
    let state = load_checkpoint(&a.checkpoint)?;
    let env = require_env(a.env.as_deref(), state.env.as_deref())?;
    let dim = env.spec().state_dim;
    let (target, source) = match (&a.target, &a.data, a.trajectory) {
        (Some(path), _, _) => (read_target(path, dim)?, path.clone()),
        (None, Some(path), Some(i)) => {
            let ds = load_data(path)?;
            let tr = ds
                .trajectories()
                .get(i)
                .ok_or_else(|| usage(format!("trajectory {i} out of range ({} in dataset)", ds.len())))?;
            (trajectory_states(tr), path.clone())
        }
        _ => return Err(usage("pass --target or --data with --trajectory")),
    };
    let steps = a.max_steps.unwrap_or(target.len().max(env.spec().max_episode_steps));
    let rep = reconstruct(&state.agent(), env.as_ref(), &target, steps, a.seed)?;

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let names = axis_names(dim);
    let mut traj = format!("series,step,{}\n", names.join(","));
    for (series, states) in [("target", &rep.target_states), ("reconstruction", &rep.reconstruction.states)] {
        for (t, s) in states.iter().enumerate() {
            let cols: Vec<String> = s.iter().map(|v| v.to_string()).collect();
            traj += &format!("{series},{t},{}\n", cols.join(","));
        }
    }
    let mut hist = String::from("skill_id,target,reconstructed\n");
    for (k, (p, q)) in rep.target_histogram.iter().zip(&rep.reconstructed_histogram).enumerate() {
        hist += &format!("{k},{p},{q}\n");
    }
    let traj_svg = plot::render(
        "target vs reconstruction",
        &[
            Series { label: "target", color: "#1f77b4", points: planar(&rep.target_states), markers: true },
            Series {
                label: "reconstruction",
                color: "#d62728",
                points: planar(&rep.reconstruction.states),
                markers: true,
            },
        ],
    );
    let hist_points = |h: &[f64]| h.iter().enumerate().map(|(k, &v)| [k as f64, v]).collect::<Vec<_>>();
    let hist_svg = plot::render(
        "skill histograms",
        &[
            Series { label: "target", color: "#1f77b4", points: hist_points(&rep.target_histogram), markers: true },
            Series {
                label: "reconstructed",
                color: "#d62728",
                points: hist_points(&rep.reconstructed_histogram),
                markers: true,
            },
        ],
    );
    let report = json!({
        "endpoint_error": rep.endpoint_error,
        "histogram_distance": rep.histogram_distance,
        "target_indices": rep.target_indices,
        "observed_indices": rep.reconstruction.observed_indices,
        "steps": rep.reconstruction.steps,
        "total_reward": rep.reconstruction.total_reward,
    });
    let files = [
        ("trajectory.csv", traj),
        ("histogram.csv", hist),
        ("trajectory.svg", traj_svg),
        ("histogram.svg", hist_svg),
        ("report.json", serde_json::to_string_pretty(&report)? + "\n"),
    ];
    let mut m = RunManifest::new(
        "reconstruct",
        json!({ "env": env.spec().name, "max_steps": steps, "target": source.display().to_string(), "trajectory": a.trajectory }),
        started,
    )
    .checkpoint(&a.checkpoint)?
    .seeds(&[a.seed]);
    if a.data.is_some() && a.target.is_none() {
        m = m.dataset(&source)?;
    }
    for (name, body) in files {
        let path = a.out_dir.join(name);
        fs::write(&path, body)?;
        m = m.output(&path);
    }
    m.write(&a.out_dir.join("manifest.json"))?;
    println!(
        "endpoint error {:.4}, histogram distance {:.4} -> {}",
        rep.endpoint_error,
        rep.histogram_distance,
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let started = manifest::now();
    let counts: Vec<usize> = a
        .skills
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| usage(format!("bad skill count `{s}`"))))
        .collect::<Result<_>>()?;
    if counts.is_empty() {
        return Err(usage("--skills must list at least one skill count"));
    }
    if a.train_seeds.is_empty() || a.eval_seeds.is_empty() {
        return Err(usage("seed lists must not be empty"));
    }
    let base = a.model.resolve()?;
    let ds = load_data(&a.data)?;
    let env = require_env(a.env.as_deref(), Some(&ds.name))?;
    let bounds = bounds_for(Some(env.as_ref()), &ds);
    let steps = a.max_steps.unwrap_or(env.spec().max_episode_steps);
    let mut csv = String::from("num_skills,mean_best_return,std_best_return,best_returns\n");
    for &n in &counts {
        let mut bests = Vec::new();
        for &seed in &a.train_seeds {
            let cfg = TrainConfig { num_skills: n, seed, ..base.clone() };
            let mut st = TrainState::init(&cfg, &ds, &bounds)?;
            run(&mut st, &ds, &mut FitHooks::default())?;
            let ev = evaluate_all_skills(&st.agent(), env.as_ref(), &a.eval_seeds, steps)?;
            log::info!("N = {n}, seed {seed}: best skill {} return {:.3}", ev.best_skill, ev.best_return);
            bests.push(ev.best_return);
        }
        let (mean, std) = mean_std(&bests);
        let per_seed: Vec<String> = bests.iter().map(|b| b.to_string()).collect();
        csv += &format!("{n},{mean},{std},{}\n", per_seed.join(";"));
        println!("N = {n:>3}: best return {mean:.3} +- {std:.3}");
    }
    create_parent(&a.out)?;
    fs::write(&a.out, csv)?;
    let mut seeds = a.train_seeds.clone();
    seeds.extend(&a.eval_seeds);
    RunManifest::new(
        "ablate",
        json!({
            "env": env.spec().name,
            "skills": counts,
            "train_seeds": a.train_seeds,
            "eval_seeds": a.eval_seeds,
            "max_steps": steps,
            "train": config_map(&base),
        }),
        started,
    )
    .dataset(&a.data)?
    .seeds(&seeds)
    .output(&a.out)
    .write(&beside(&a.out))?;
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &dataset_stats(&ds))?;
    writeln!(out)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
