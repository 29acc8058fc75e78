//! The `mba` command-line harness: world generation, training, evaluation
//! and ablation grids, each a pure function of its arguments and inputs.

pub mod ablate;
pub mod args;
pub mod error;
pub mod run;
pub mod suite;

use std::fs;
use std::path::Path;

use mba_core::agent::{Agent, Policy};

use args::{AblateArgs, Command, EvalArgs, GenWorldArgs, PolicyArg, TrainArgs};
pub use error::{CliError, Result};
use error::io_at;
use run::{evaluate_suite, expert_agent, parse_branches, train_log_csv, train_suite, RunSpec};
use suite::{Suite, SuiteParams};

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::GenWorld(a) => gen_world(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io_at(&path))
}

pub fn gen_world(a: &GenWorldArgs) -> Result<()> {
    let params = SuiteParams::new(&a.world, a.split, a.common.seed, a.worlds, a.episodes, a.first_episode);
    let suite = Suite::generate(&params)?;
    suite.write(&a.common.out)?;
    for (i, (g, eps)) in suite.worlds.iter().zip(&suite.episodes).enumerate() {
        println!("world {i}: seed {} K {} edges {} episodes {}", g.seed(), g.len(), g.edges().len(), eps.len());
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let suite = Suite::read(&a.data)?;
    let spec = RunSpec::new(parse_branches(&a.branches)?, a.gamma, a.common.seed, &a.model, &a.optim);
    let trained = train_suite(&suite, &spec)?;
    let out = &a.common.out;
    write(out, "init.json", &trained.init.to_checkpoint_json()?)?;
    write(out, "checkpoint.json", &trained.agent.to_checkpoint_json()?)?;
    write(out, "train_log.csv", &train_log_csv(&trained.log))?;
    for e in &trained.log {
        println!(
            "epoch {:>3}  loss {:.4}  (il {:.4}  dagger {:.4}  object {:.4})  train SR {:.3}",
            e.epoch, e.mean_loss, e.term1, e.term2, e.term3, e.train_sr
        );
    }
    Ok(())
}

pub fn load_agent(path: &Path) -> Result<Agent> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    Ok(Agent::from_checkpoint_json(&text)?)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let suite = Suite::read(&a.data)?;
    let (agent, policy) = match a.policy {
        PolicyArg::Oracle => match &a.checkpoint {
            Some(path) => (load_agent(path)?, Policy::Oracle),
            None => (expert_agent(&suite)?, Policy::Oracle),
        },
        other => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("--checkpoint is required unless --policy oracle".into()))?;
            let policy = if other == PolicyArg::Sample { Policy::Sample(a.common.seed) } else { Policy::Greedy };
            (load_agent(path)?, policy)
        }
    };
    let evaluation = evaluate_suite(&agent, &suite, policy, a.dump_traj)?;
    let out = &a.common.out;
    write(out, "metrics.csv", &evaluation.metrics_csv())?;
    write(out, "summary.csv", &evaluation.summary.csv())?;
    if a.dump_traj {
        write(out, "trajectories.jsonl", &evaluation.traces_jsonl()?)?;
    }
    println!("{}", evaluation.summary.report());
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let cells = ablate::run_grid(a)?;
    let out = &a.common.out;
    write(out, "grid.csv", &ablate::grid_csv(&cells))?;
    write(out, "spl_matrix.csv", &ablate::spl_matrix_csv(&cells))?;
    for c in &cells {
        match &c.outcome {
            Ok((seen, unseen)) => println!(
                "{:<28} gamma {:.2} seed {:>3}  seen SR {:.3} SPL {:.3}  unseen SR {:.3} SPL {:.3}",
                c.config.to_string(),
                c.gamma,
                c.seed,
                seen.sr,
                seen.spl,
                unseen.sr,
                unseen.spl
            ),
            Err(msg) => eprintln!("{:<28} gamma {:.2} seed {:>3}  failed: {msg}", c.config.to_string(), c.gamma, c.seed),
        }
    }
    Ok(())
}
