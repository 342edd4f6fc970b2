use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use sdb_core::ablation::{ablate, cue_ablation, AblationGrid, AblationResults, GridConfig, RunResult};
use sdb_core::config::{self, FlatConfig};
use sdb_core::eval::{evaluate, write_jsonl};
use sdb_core::gradcheck::grad_check;
use sdb_core::model::SdbModel;
use sdb_core::spcr::{read_plan_log, spcr_log, DEFAULT_WINDOW};
use sdb_core::train::{train, TrainConfig};
use sdb_core::types::{CueMask, ModelConfig};
use sdb_core::world::{ToyWorld, WorldConfig};
use sdb_core::SdbError;

#[derive(Parser)]
#[command(name = "sdb", version, about = "Train and evaluate the multi-hypothesis decision operator on synthetic navigation graphs")]
struct Cli {
    /// Flat key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set k=5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; honours log_path and checkpoint_path
    Train {
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint on the held-out episodes
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-episode JSONL output
        #[arg(long)]
        episodes: Option<PathBuf>,
    },
    /// Train and evaluate every grid cell for every seed
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// Run a cue ablation instead, dropping these cues (e.g. "A,S"; "" for none)
        #[arg(long)]
        drop_cues: Option<String>,
    },
    /// Plan change rates of a JSONL plan log
    Spcr {
        #[arg(long)]
        plans: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
    },
    /// Finite-difference gradient check on toy dimensions
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        episodes: usize,
    },
    /// Print the full configuration with defaults and units
    Config,
}

struct Configs {
    model: ModelConfig,
    world: WorldConfig,
    train: TrainConfig,
    grid: GridConfig,
}

fn load_configs(cli: &Cli) -> sdb_core::Result<Configs> {
    let mut c = Configs {
        model: ModelConfig::default(),
        world: WorldConfig::default(),
        train: TrainConfig::default(),
        grid: GridConfig::default(),
    };
    let mut targets: [&mut dyn FlatConfig; 4] = [&mut c.model, &mut c.world, &mut c.train, &mut c.grid];
    if let Some(path) = &cli.config {
        config::load_into(path, &mut targets)?;
    }
    let mut table = toml::Table::new();
    for o in &cli.overrides {
        let (k, v) = config::parse_override(o)?;
        table.insert(k, v);
    }
    config::apply(&table, &mut targets)?;
    c.model.validate()?;
    c.world.validate()?;
    c.train.validate()?;
    Ok(c)
}

fn print_results(res: &AblationResults) {
    for s in &res.summaries {
        let (sr, sr_std) = s.sr();
        let (spl, spl_std) = s.spl();
        println!(
            "dem={} ssm={} K={} drop={} runs={} SR={:.3}±{:.3} SPL={:.3}±{:.3}",
            s.cell.dem.map_or("none".into(), |d| d.to_string()),
            s.cell.ssm.map_or("none".into(), |d| d.to_string()),
            s.cell.k,
            s.cell.drop,
            s.runs,
            sr,
            sr_std,
            spl,
            spl_std
        );
    }
}

fn progress(r: &RunResult) {
    eprintln!("  K={} seed={} SR={:.3} SPL={:.3}", r.cell.k, r.seed, r.metrics.sr, r.metrics.spl);
}

fn world(c: &Configs) -> sdb_core::Result<ToyWorld> {
    ToyWorld::new(&c.world, c.model.env_dim, c.model.max_instruction_len)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut c = load_configs(cli)?;
    match &cli.command {
        Command::Config => {
            print!("{}", config::render(&[("model", &c.model), ("world", &c.world), ("train", &c.train), ("grid", &c.grid)]));
        }
        Command::Train { log, checkpoint } => {
            if let Some(p) = log {
                c.train.log_path = p.display().to_string();
            }
            if let Some(p) = checkpoint {
                c.train.checkpoint_path = p.display().to_string();
            }
            let w = world(&c)?;
            let out = train(&c.model, &c.train, &w)?;
            for (it, m) in &out.evals {
                eprintln!("iteration {it}: SR={:.3} SPL={:.3}", m.sr, m.spl);
            }
            let report = evaluate(&out.model, &w.eval)?;
            println!("{}", serde_json::to_string(&report.metrics)?);
        }
        Command::Eval { checkpoint, episodes } => {
            let model = SdbModel::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let w = ToyWorld::new(&c.world, model.cfg.env_dim, model.cfg.max_instruction_len)?;
            let report = evaluate(&model, &w.eval)?;
            if let Some(p) = episodes {
                write_jsonl(p, &report.records)?;
            }
            println!("{}", serde_json::to_string(&report.metrics)?);
        }
        Command::Ablate { out, drop_cues } => {
            let w = world(&c)?;
            let res = match drop_cues {
                Some(d) => {
                    let drop: CueMask = d.parse().map_err(SdbError::Config)?;
                    cue_ablation(drop, &c.train.seeds, &c.model, &c.train, &w, progress)?
                }
                None => {
                    let grid = AblationGrid::from_config(&c.grid, &c.train.seeds)?;
                    ablate(&grid, &c.model, &c.train, &w, progress)?
                }
            };
            res.write_csv(out)?;
            print_results(&res);
        }
        Command::Spcr { plans, window } => {
            let log = read_plan_log(plans)?;
            let r = spcr_log(&log, *window)?;
            println!("episodes={} rates={} window={} mean={:.6} std={:.6}", log.len(), r.count, r.window, r.mean, r.std);
        }
        Command::Gradcheck { eps, steps, episodes } => {
            let toy = ModelConfig { seed: c.model.seed, dem_mode: c.model.dem_mode, ssm_mode: c.model.ssm_mode, ..ModelConfig::toy() };
            let report = grad_check(&toy, *steps, *episodes, *eps, toy.seed)?;
            for (g, r) in &report.groups {
                println!("{:<12} scalars={:<5} max_rel_err={:.3e} max_abs_grad={:.3e}", g.name(), r.scalars, r.max_rel_error, r.max_abs_grad);
            }
            let worst = report.max_rel_error();
            println!("max relative error {worst:.3e}");
            if worst >= 1e-4 {
                return Err(SdbError::NonFinite("gradient check exceeded tolerance").into());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<SdbError>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
