use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mocap_core::config::{ConfigError, RunConfig};
use mocap_core::experiment::{robustness, run_efficacy, EfficacyConfig};
use mocap_core::marl::train;
use mocap_core::metrics::{behavior_stats, evaluate, EvalOptions, EvalPolicy, FrameRecord, HistogramEdges};
use mocap_core::neural::checkpoint::{Checkpoint, CheckpointError};
use mocap_core::neural::Network;
use mocap_core::par;
use mocap_core::perception::TriangulationMethod;
use mocap_core::scene::{contributions, Scene};
use serde::Serialize;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "active-mocap", version, about = "Active multi-camera motion capture: training, evaluation and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a camera team policy.
    Train(TrainArgs),
    /// Evaluate a learned policy or a baseline.
    Eval(EvalArgs),
    /// Per-camera contribution report for a single-frame scene file.
    Contrib(ContribArgs),
    /// Behaviour histograms (CSV) from an evaluation frame log.
    Stats(StatsArgs),
    /// Train both reward arms over several seeds and compare against the static formation.
    Efficacy(EfficacyArgs),
    /// Evaluate a trained policy under command smoothing and noise.
    Robustness(RobustnessArgs),
}

#[derive(Args)]
struct ConfigSource {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset: desk or paper.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigSource {
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            return Ok(RunConfig::load(path)?);
        }
        if let Some(name) = &self.preset {
            return Ok(RunConfig::preset(name)?);
        }
        if let Some(path) = fallback.filter(|p| p.exists()) {
            return Ok(RunConfig::load(path)?);
        }
        Ok(RunConfig::desk())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for the config snapshot, metrics log and checkpoints.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Fixed,
    Rulebased,
    Learned,
}

#[derive(Clone, Copy, ValueEnum)]
enum Triangulation {
    Dlt,
    Ransac,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Policy checkpoint; its run directory's config.toml is used when no config is given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "learned")]
    policy: PolicyKind,
    #[arg(long)]
    n_cams: Option<usize>,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Success threshold in millimetres.
    #[arg(long, default_value_t = 200.0)]
    tau: f64,
    #[arg(long, value_enum)]
    triangulation: Option<Triangulation>,
    /// Low-pass coefficient for the reconstructed target (1 disables).
    #[arg(long)]
    smoothing: Option<f64>,
    /// Sample actions instead of taking the most likely one.
    #[arg(long)]
    stochastic: bool,
    /// Log per-camera contributions in every frame.
    #[arg(long)]
    log_ctcr: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for summary.json and frames.jsonl.
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
}

#[derive(Args)]
struct ContribArgs {
    scene: PathBuf,
    /// Report file; defaults to the scene path with a .contrib.json suffix.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scene's noise seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct StatsArgs {
    frames: PathBuf,
    #[arg(long, default_value = "runs/stats")]
    out: PathBuf,
}

#[derive(Args)]
struct EfficacyArgs {
    #[arg(long, default_value = "runs/efficacy")]
    out: PathBuf,
    #[arg(long, default_value_t = 150_000)]
    steps: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    #[arg(long, num_args = 2, default_values_t = [0.8, 1.2])]
    noise: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample actions instead of taking the most likely one.
    #[arg(long)]
    stochastic: bool,
    #[arg(long, default_value = "runs/robustness.json")]
    out: PathBuf,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut run = a.source.resolve(None)?;
    if let Some(seed) = a.seed {
        run.world.seed = seed;
    }
    if a.print_config {
        print!("{}", run.to_toml_string());
        return Ok(());
    }
    let iterations = run.train.iterations();
    eprintln!("training {iterations} iterations into {}", a.out.display());
    let outcome = train(&run, Some(&a.out), |row| {
        eprintln!(
            "iter {:>5}  steps {:>8}  team_reward {:.4}  mpjpe {:>8}  kl {:.4}",
            row.iteration,
            row.env_steps,
            row.team_reward,
            row.mpjpe_mm.map_or("-".to_string(), |m| format!("{m:.1}")),
            row.kl
        );
    })?;
    println!(
        "wrote {} checkpoints and {} metrics rows to {}",
        outcome.checkpoints.len(),
        outcome.rows.len(),
        a.out.display()
    );
    Ok(())
}

fn checkpoint_config(ckpt: &Path) -> Option<PathBuf> {
    ckpt.ancestors()
        .skip(1)
        .take(2)
        .map(|d| d.join("config.toml"))
        .find(|p| p.exists())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let fallback = a.checkpoint.as_deref().and_then(checkpoint_config);
    let mut run = a.source.resolve(fallback.as_deref())?;
    if let Some(n) = a.n_cams {
        run.world.num_cameras = n;
    }
    if let Some(t) = a.triangulation {
        run.perception.triangulation = match t {
            Triangulation::Dlt => TriangulationMethod::Dlt,
            Triangulation::Ransac => TriangulationMethod::Ransac,
        };
    }
    let policy = match a.policy {
        PolicyKind::Fixed => EvalPolicy::Fixed,
        PolicyKind::Rulebased => EvalPolicy::RuleBased(run.formation.clone()),
        PolicyKind::Learned => {
            let Some(path) = &a.checkpoint else {
                bail!("--policy learned needs --checkpoint");
            };
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            EvalPolicy::from_checkpoint(&ck, &run.architecture(), a.stochastic)?
        }
    };
    let options = EvalOptions {
        episodes: a.episodes,
        tau_mm: a.tau,
        seed: a.seed,
        smoothing: a.smoothing,
        log_ctcr: a.log_ctcr,
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let frames_path = a.out.join("frames.jsonl");
    let mut frames = BufWriter::new(File::create(&frames_path).with_context(|| format!("creating {}", frames_path.display()))?);
    let summary = evaluate(&policy, &run.env_config(), &options, Some(&mut frames))?;
    frames.flush()?;
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("policy            {}", summary.policy);
    println!("cameras           {}", run.world.num_cameras);
    println!("episodes          {}", summary.episodes);
    println!("frames            {}", summary.frames);
    println!("mean MPJPE (mm)   {:.2}", summary.mean_mpjpe_mm);
    println!("tau (mm)          {}", summary.tau_mm);
    println!("success rate      {:.4}", summary.success_rate);
    println!("lost frames       {}", summary.lost_frames);
    println!("team reward       {:.4}", summary.mean_team_reward);
    println!("min human dist    {:.3}", summary.min_human_distance);
    Ok(())
}

fn cmd_contrib(a: &ContribArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.scene).with_context(|| format!("reading {}", a.scene.display()))?;
    let mut scene = Scene::parse(&text).with_context(|| a.scene.display().to_string())?;
    if let Some(seed) = a.seed {
        scene.seed = seed;
    }
    let report = contributions(&scene)?;
    println!("{:<10}{:>12}", "coalition", "reward");
    for c in &report.coalitions {
        let ids: Vec<String> = c.cameras.iter().map(ToString::to_string).collect();
        println!("{:<10}{:>12.6}", format!("{{{}}}", ids.join(",")), c.reward);
    }
    println!();
    println!("{:<8}{:>10}{:>12}", "camera", "visible", "ctcr");
    for (i, (v, c)) in report.visible_joints.iter().zip(&report.ctcr).enumerate() {
        println!("{i:<8}{v:>10}{c:>12.6}");
    }
    let out = a.out.clone().unwrap_or_else(|| a.scene.with_extension("contrib.json"));
    write_json(&out, &report)?;
    println!("\nwrote {}", out.display());
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let file = File::open(&a.frames).with_context(|| format!("opening {}", a.frames.display()))?;
    let mut frames = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: FrameRecord =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", a.frames.display(), i + 1))?;
        frames.push(f);
    }
    let s = behavior_stats(&frames, &HistogramEdges::default());
    std::fs::create_dir_all(&a.out)?;
    for (name, h) in [
        ("camera_target_distance", &s.camera_target_distance),
        ("pitch_deg", &s.pitch_deg),
        ("min_camera_angle_deg", &s.min_camera_angle_deg),
        ("min_human_distance", &s.min_human_distance),
    ] {
        let path = a.out.join(format!("{name}.csv"));
        std::fs::write(&path, h.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        println!("{name:<24} {:>8} samples -> {}", h.total(), path.display());
    }
    Ok(())
}

fn cmd_efficacy(a: &EfficacyArgs) -> Result<()> {
    let cfg = EfficacyConfig {
        seeds: a.seeds.clone(),
        total_steps: a.steps,
        eval_episodes: a.episodes,
        ..EfficacyConfig::default()
    };
    let report = run_efficacy(&cfg, Some(&a.out), |m| eprintln!("{m}"))?;
    write_json(&a.out.join("efficacy.json"), &report)?;
    println!("{:<6}{:>12}{:>12}{:>12}", "seed", "ctcr_wdl", "shared", "fixed");
    for s in &report.seeds {
        println!(
            "{:<6}{:>12.1}{:>12.1}{:>12.1}",
            s.seed, s.ctcr_wdl.mean_mpjpe_mm, s.shared.mean_mpjpe_mm, s.fixed.mean_mpjpe_mm
        );
    }
    println!(
        "beats fixed: {}  seeds not worse than shared: {}/{}",
        report.beats_fixed(),
        report.seeds_not_worse_than_shared(),
        report.seeds.len()
    );
    Ok(())
}

fn cmd_robustness(a: &RobustnessArgs) -> Result<()> {
    let fallback = checkpoint_config(&a.checkpoint);
    let run = a.source.resolve(fallback.as_deref())?;
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    ck.ensure_arch(&run.architecture())?;
    let report = robustness(
        &run,
        Network::new(ck.arch.clone()),
        ck.params,
        a.episodes,
        a.eta,
        [a.noise[0], a.noise[1]],
        a.seed,
        a.stochastic,
    )?;
    println!("{:<14}{:>12}{:>10}{:>14}", "condition", "mpjpe_mm", "success", "degradation");
    for r in &report.rows {
        println!(
            "{:<14}{:>12.1}{:>10.3}{:>14.1}",
            r.condition, r.mean_mpjpe_mm, r.success_rate, r.degradation_mm
        );
    }
    for (name, ok) in report.ordering() {
        println!("{name}: {ok}");
    }
    write_json(&a.out, &report)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            if matches!(e, CheckpointError::VersionMismatch { .. }) {
                return 3;
            }
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("ACTIVE_MOCAP_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                par::init_threads(n);
            }
            _ => eprintln!("ignoring ACTIVE_MOCAP_THREADS={v:?}: expected a positive integer"),
        }
    }
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Contrib(a) => cmd_contrib(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Efficacy(a) => cmd_efficacy(a),
        Command::Robustness(a) => cmd_robustness(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
