use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afford_core::config::ExperimentConfig;
use afford_core::eval::{plot_metrics, read_records};
use afford_core::experiment::{
    evaluate_run, load_scene_set, replay_episode, run_ablation_suite, run_id, train, write_scene_set,
};
use afford_core::policy::Arm;
use afford_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "afford", version, about = "Interactive affordance learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the ablation arm.
    #[arg(long, value_parser = parse_arm)]
    arm: Option<Arm>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded train/val/test scene sets.
    SceneGen {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to `paths.scenes` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one run: collect episodes, label, retrain, update the policy.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Continue from the checkpoint in `--out`.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Evaluate a trained run on the test scenes.
    Eval {
        /// Run directory containing `manifest.json`.
        run: PathBuf,
        /// Report directory; defaults to `<run>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate every arm over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at the config seed.
        #[arg(long, default_value_t = 2)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Re-execute a logged episode and compare outcomes.
    Replay {
        run: PathBuf,
        #[arg(long)]
        episode: u64,
        /// Where to write the recomputed action log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one SVG chart per metric from a report CSV.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_arm(s: &str) -> std::result::Result<Arm, String> {
    Arm::from_name(s).ok_or_else(|| format!("unknown arm `{s}` (expected full, no_map_seg or no_map_no_seg)"))
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(a) = c.arm {
        cfg.arm = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn refuse_existing(dir: &Path, force: bool) -> Result<()> {
    if !force && dir.exists() && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(Error::Exists(dir.to_path_buf()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SceneGen { common, out, force } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| cfg.paths.scenes.clone());
            let files = write_scene_set(&cfg, &out, force)?;
            println!("wrote {} scenes to {}", files.len(), out.display());
        }
        Command::Train { common, out, force, resume } => {
            let cfg = load_config(&common)?;
            let scenes = load_scene_set(&cfg.paths.scenes)?;
            let m = train(&cfg, &scenes, &out, force, resume)?;
            println!("{}: {} episodes, {} steps -> {}", run_id(&cfg), m.episodes.len(), m.env_steps, out.display());
        }
        Command::Eval { run, out, force } => {
            let out = out.unwrap_or_else(|| run.join("eval"));
            refuse_existing(&out, force)?;
            let cfg = ExperimentConfig::load(&run.join("config.toml"))?;
            let scenes = load_scene_set(&cfg.paths.scenes)?;
            let rep = evaluate_run(&run, &scenes, &out)?;
            for r in &rep.test {
                println!("{:<34} {:<8} {:.4}", r.metric.name(), r.affordance, r.value);
            }
        }
        Command::Ablate { common, seeds, out, force } => {
            let cfg = load_config(&common)?;
            let scenes = load_scene_set(&cfg.paths.scenes)?;
            let seeds: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
            let rep = run_ablation_suite(&cfg, &seeds, &Arm::ALL, &scenes, &out, force)?;
            print!("{}", rep.summary);
        }
        Command::Replay { run, episode, out } => {
            let cfg = ExperimentConfig::load(&run.join("config.toml"))?;
            let scenes = load_scene_set(&cfg.paths.scenes)?;
            let diff = replay_episode(&run, &scenes, episode, &out)?;
            if diff > 0 {
                return Err(Error::Contract(format!("replay of episode {episode} differs in {diff} rows")));
            }
            println!("episode {episode} replayed identically -> {}", out.display());
        }
        Command::Plot { csv, out } => {
            let records = read_records(&csv)?;
            let files = plot_metrics(&records, &out)?;
            println!("wrote {} charts to {}", files.len(), out.display());
        }
    }
    Ok(())
}

/// Usage errors count as malformed input.
fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
