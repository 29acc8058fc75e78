//! Training and evaluation on suites, shared by the single commands and the
//! ablation grid.

use std::fmt::Write as _;

use mba_core::agent::{rollout, Agent, AgentConfig, BranchConfig, Policy, RolloutOptions};
use mba_core::metrics::{aggregate, evaluate, EpisodeMetrics, EpisodeResult, Summary};
use mba_core::topomap::TrajectoryStep;
use mba_core::training::{train, EpochLog, TrainConfig, TrainingEpisode};
use rayon::prelude::*;

use crate::args::{ModelArgs, OptimArgs};
use crate::error::{CliError, Result};
use crate::suite::Suite;

pub const TRAIN_LOG_HEADER: &str = "epoch,mean_loss,term1,term2,term3,train_SR";
pub const EVAL_HEADER: &str = "world,episode_id,TL,NE,SR,SPL,RGS,RGSPL,stopped,steps";

/// Everything that decides a training run besides the data.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub branches: BranchConfig,
    pub model: ModelArgs,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn new(branches: BranchConfig, gamma: f64, seed: u64, model: &ModelArgs, optim: &OptimArgs) -> Self {
        let train = TrainConfig {
            mu: optim.mu,
            gamma,
            learning_rate: optim.lr,
            momentum: optim.momentum,
            epochs: optim.epochs,
            batch_size: optim.batch_size,
            il_dagger_mix: optim.mix,
            seed,
            resample_perturbations: optim.resample,
            max_grad_norm: optim.max_grad_norm,
        };
        Self { branches: branches.with_default_gamma(gamma), model: model.clone(), train }
    }

    fn agent_config(&self, suite: &Suite) -> AgentConfig {
        AgentConfig {
            branches: self.branches.clone(),
            feature_dim: suite.feature_dim(),
            depth_dim: self.model.depth_dim,
            instruction_dim: suite.instruction_dim(),
            object_dim: suite.object_dim(),
            hidden_dim: self.model.hidden,
            ffn_hidden: self.model.ffn_hidden,
            share_branch_params: self.model.share_params,
            init_seed: self.train.seed,
        }
    }
}

pub struct Trained {
    /// Initial weights with the instruction center already fitted.
    pub init: Agent,
    pub agent: Agent,
    pub log: Vec<EpochLog>,
}

pub fn parse_branches(text: &str) -> Result<BranchConfig> {
    text.parse().map_err(|e: mba_core::MbaError| CliError::Usage(format!("branches `{text}`: {e}")))
}

fn depth_dim(agent: &Agent) -> Option<usize> {
    let c = agent.config();
    c.branches.uses_depth().then_some(c.depth_dim)
}

pub fn train_suite(suite: &Suite, spec: &RunSpec) -> Result<Trained> {
    spec.train.validate()?;
    let mut init = Agent::new(spec.agent_config(suite))?;
    init.fit_instruction_center(suite.iter_episodes().map(|(_, e)| e.instruction.as_slice()))?;
    let scenes = suite.scenes(depth_dim(&init))?;
    let episodes: Vec<TrainingEpisode> =
        suite.iter_episodes().map(|(scene, e)| TrainingEpisode { scene, episode: e.clone() }).collect();
    let mut agent = init.clone();
    let log = train(&mut agent, &scenes, &episodes, &spec.train)?;
    Ok(Trained { init, agent, log })
}

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{TRAIN_LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            e.epoch, e.mean_loss, e.term1, e.term2, e.term3, e.train_sr
        );
    }
    out
}

/// Sizes the checkpoint was built for must match the suite.
pub fn check_fit(agent: &Agent, suite: &Suite) -> Result<()> {
    let c = agent.config();
    let pairs = [
        ("feature dim", c.feature_dim, suite.feature_dim()),
        ("object dim", c.object_dim, suite.object_dim()),
        ("instruction dim", c.instruction_dim, suite.instruction_dim()),
    ];
    for (what, model, data) in pairs {
        if model != data {
            return Err(CliError::Mismatch(format!("{what} is {model} in the checkpoint and {data} in the data")));
        }
    }
    Ok(())
}

/// An agent whose weights are never used, sized for `suite`; the expert
/// policy only needs its branch layout.
pub fn expert_agent(suite: &Suite) -> Result<Agent> {
    let cfg = AgentConfig {
        feature_dim: suite.feature_dim(),
        instruction_dim: suite.instruction_dim(),
        object_dim: suite.object_dim(),
        ..AgentConfig::new(BranchConfig::baseline())
    };
    Ok(Agent::new(cfg)?)
}

pub struct Evaluation {
    /// `(world, metrics)` in suite order.
    pub rows: Vec<(usize, EpisodeMetrics)>,
    pub summary: Summary,
    /// `(world, steps)` per episode, kept only on request.
    pub traces: Vec<(usize, Vec<TrajectoryStep>)>,
}

pub fn evaluate_suite(agent: &Agent, suite: &Suite, policy: Policy, keep_traces: bool) -> Result<Evaluation> {
    check_fit(agent, suite)?;
    let scenes = suite.scenes(depth_dim(agent))?;
    let jobs: Vec<(usize, &mba_core::world::Episode)> = suite.iter_episodes().collect();
    let outcomes: Vec<Result<(EpisodeMetrics, Vec<TrajectoryStep>)>> = jobs
        .par_iter()
        .map(|&(w, e)| {
            let scene = &scenes[w];
            let r = rollout(agent, scene, e, &RolloutOptions::new(policy))?;
            let result = EpisodeResult {
                episode: e.clone(),
                trajectory: r.trajectory.clone(),
                stopped: r.stopped,
                predicted_object: r.predicted_object,
                steps: r.steps.len(),
            };
            let trace = if keep_traces { r.trace() } else { Vec::new() };
            Ok((evaluate(scene.graph(), &result)?, trace))
        })
        .collect();
    let mut rows = Vec::with_capacity(jobs.len());
    let mut traces = Vec::new();
    for (&(w, _), outcome) in jobs.iter().zip(outcomes) {
        let (m, trace) = outcome?;
        rows.push((w, m));
        if keep_traces {
            traces.push((w, trace));
        }
    }
    let metrics: Vec<EpisodeMetrics> = rows.iter().map(|(_, m)| m.clone()).collect();
    let summary = aggregate(&metrics)?;
    Ok(Evaluation { rows, summary, traces })
}

impl Evaluation {
    pub fn metrics_csv(&self) -> String {
        let mut out = format!("{EVAL_HEADER}\n");
        for (w, m) in &self.rows {
            let _ = writeln!(
                out,
                "{w},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
                m.episode_id,
                m.tl,
                m.ne,
                m.sr,
                m.spl,
                m.rgs,
                m.rgspl,
                u8::from(m.stopped),
                m.steps
            );
        }
        out
    }

    pub fn traces_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (w, steps) in &self.traces {
            for step in steps {
                let mut value = serde_json::to_value(step).map_err(mba_core::MbaError::from)?;
                if let Some(obj) = value.as_object_mut() {
                    obj.insert("world".into(), (*w).into());
                }
                out.push_str(&value.to_string());
                out.push('\n');
            }
        }
        Ok(out)
    }
}
