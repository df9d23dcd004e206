use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ihlab::checkpoint::load_checkpoint;
use ihlab::config::{CollisionMode, ExperimentConfig};
use ihlab::experiments;
use ihlab::model::PeMode;

/// Induction-head lab: train, construct and probe two-layer
/// associative-memory transformers.
#[derive(Parser, Debug)]
#[command(name = "ihlab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file; unset fields take the desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: `out_dir` from the config, else `out`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample sequences from the configured data model as JSON lines.
    GenData {
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Sequence length (default: model.seq_len + 1).
        #[arg(long)]
        len: Option<usize>,
        /// Output file (default: <out-dir>/data.jsonl).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train one model; writes metrics.csv and model.ckpt.
    Train {
        #[command(flatten)]
        train: TrainOverrides,
        #[arg(long, value_enum)]
        pe: Option<Pe>,
    },
    /// Previous-token recall of APE vs RPE models during training.
    PrevToken {
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Train at T, evaluate at T and 2T, for APE and RPE.
    LengthGen {
        #[command(flatten)]
        train: TrainOverrides,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Sweep the B1/B2 frequency split of collision prompts.
    Collision {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        prompts: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare constructed models against the closed-form logits; exits
    /// nonzero when a tolerance is exceeded.
    TheoryCheck {
        #[arg(long)]
        specs: Option<usize>,
    },
    /// One gradient step per stage from zero; reports layer-1 recall
    /// (relative) or the decay of its scores with position (absolute).
    OneStep {
        #[arg(long, value_enum, default_value = "rpe")]
        pe: Pe,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Attention weights of both layers on one random sequence.
    Heatmap {
        /// Model to load (default: the relative-encoding construction).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        len: usize,
    },
    /// Checkpoint utilities.
    Checkpoint {
        #[command(subcommand)]
        action: CheckpointAction,
    },
}

#[derive(Subcommand, Debug)]
enum CheckpointAction {
    /// Print the manifest of a checkpoint file.
    Inspect { path: PathBuf },
}

#[derive(Args, Debug)]
struct TrainOverrides {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Pe {
    Ape,
    Rpe,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Constructed,
    Trained,
}

impl From<Pe> for PeMode {
    fn from(p: Pe) -> Self {
        match p {
            Pe::Ape => PeMode::Ape,
            Pe::Rpe => PeMode::Rpe,
        }
    }
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.training;
        if let Some(x) = self.iterations {
            t.iterations = x;
        }
        if let Some(x) = self.batch {
            t.batch = x;
        }
        if let Some(x) = self.lr {
            t.lr = x;
        }
        if let Some(x) = self.eval_every {
            t.eval_every = x;
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("IHLAB_THREADS") {
        let n: usize = v.parse().with_context(|| format!("IHLAB_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn inspect(path: &Path) -> Result<()> {
    let ck = load_checkpoint(path)?;
    println!("{}", serde_json::to_string_pretty(&ck.manifest)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    let (mut cfg, out) = load_config(&cli.common)?;
    match cli.command {
        Command::GenData { count, len, output } => {
            cfg.validate()?;
            let len = len.unwrap_or(cfg.model.seq_len + 1);
            let path = output.unwrap_or_else(|| out.join("data.jsonl"));
            let n = experiments::generate_dataset(&cfg, count, len, &path)?;
            println!("wrote {n} sequences to {}", path.display());
        }
        Command::Train { train, pe } => {
            train.apply(&mut cfg);
            if let Some(pe) = pe {
                cfg.model.pe_mode = pe.into();
            }
            cfg.validate()?;
            let (_, report) = experiments::run_train(&cfg, &out)?;
            println!("final train loss {}", report.final_loss);
            print_files(&report.files);
        }
        Command::PrevToken { train } => {
            train.apply(&mut cfg);
            cfg.validate()?;
            let report = experiments::run_prev_token_experiment(&cfg, &out)?;
            for (model, bucket, v) in &report.final_recall {
                println!("{model} {bucket}: recall {v:.4}");
            }
            print_files(&report.files);
        }
        Command::LengthGen { train, seeds } => {
            train.apply(&mut cfg);
            if let Some(s) = seeds {
                cfg.length_gen.seeds = s;
            }
            cfg.validate()?;
            let report = experiments::run_length_gen_experiment(&cfg, &out)?;
            for c in &report.cells {
                println!("{} {} @{}: {:.4} ± {:.4}", c.model, c.metric, c.horizon, c.mean, c.std);
            }
            print_files(&report.files);
        }
        Command::Collision {
            mode,
            n,
            prompts,
            checkpoint,
        } => {
            let c = &mut cfg.collision;
            if let Some(m) = mode {
                c.mode = match m {
                    Mode::Constructed => CollisionMode::Constructed,
                    Mode::Trained => CollisionMode::Trained,
                };
            }
            if let Some(n) = n {
                c.n = n;
            }
            if let Some(p) = prompts {
                c.prompts = p;
            }
            if checkpoint.is_some() {
                c.checkpoint = checkpoint;
            }
            cfg.validate()?;
            let report = experiments::run_collision_experiment(&cfg, cfg.collision.mode, &out)?;
            for c in &report.cells {
                println!("n1={} n2={}: B1 {:.3} B2 {:.3} other {:.3}", c.n1, c.n2, c.frac_b1, c.frac_b2, c.frac_global);
            }
            print_files(&report.files);
        }
        Command::TheoryCheck { specs } => {
            if let Some(s) = specs {
                cfg.theory.specs = s;
            }
            cfg.validate()?;
            let report = experiments::run_theory_check(&cfg, &out)?;
            println!(
                "two-pattern: {} specs, max deviation {:e}, argmax {}/{}",
                report.two_pattern.specs,
                report.two_pattern.max_abs_deviation,
                report.two_pattern.argmax_agreements,
                report.two_pattern.specs
            );
            println!(
                "frequency ratio: {} prompts, max deviation {:e}, argmax {}/{}",
                report.strong.prompts, report.strong.max_abs_deviation, report.strong.argmax_agreements, report.strong.prompts
            );
            for g in &report.gap_checks {
                println!("gap({}, {}) = {:+.4}, forward deviation {:e}", g.t1, g.t2, g.predicted, g.deviation);
            }
            println!("wrote {}", out.join("theory.json").display());
            if !report.passed {
                for f in &report.failures {
                    eprintln!("FAIL: {f}");
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::OneStep { pe, eta, batch } => {
            if let Some(e) = eta {
                cfg.one_step.eta = e;
            }
            if let Some(b) = batch {
                cfg.one_step.batch = b;
            }
            cfg.validate()?;
            let report = experiments::run_one_step(&cfg, pe.into())?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join(format!("onestep_{}.json", report.pe_mode.name()));
            std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            if let Some(r) = report.recall {
                println!("previous-token recall {r:.4}");
            }
            if let Some(u) = &report.uniformity {
                println!("score cv {:.4}, min margin {:.4e}", u.cv, u.margin);
            }
            if let Some(s) = report.decay_spearman {
                println!("spearman(profile, 1/t) {s:.4}");
            }
            println!("wrote {}", path.display());
        }
        Command::Heatmap { checkpoint, len } => {
            cfg.validate()?;
            let path = experiments::run_heatmap(&cfg, checkpoint.as_deref(), len, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Checkpoint {
            action: CheckpointAction::Inspect { path },
        } => inspect(&path)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
