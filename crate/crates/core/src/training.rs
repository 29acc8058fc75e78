//! Imitation learning with teacher-forced and student (DAgger) rollouts.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::agent::rollout::{rollout, Policy, Rollout, RolloutOptions, Scene};
use crate::agent::{Action, Agent, FusedPrediction};
use crate::error::{MbaError, Result};
use crate::neural::{add_assign, flatten, scale, unflatten, zeros_like};
use crate::seed;
use crate::world::{Episode, NodeId, WorldGraph};

const TIE_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the teacher-forced term.
    pub mu: f64,
    /// Default mixing weight for perturbed branches without an explicit one.
    pub gamma: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability that a rollout is teacher-forced.
    pub il_dagger_mix: f64,
    pub seed: u64,
    /// Draw fresh perturbations every epoch instead of one fixed draw per episode.
    pub resample_perturbations: bool,
    /// Rescale batch gradients whose L2 norm exceeds this; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mu: 0.2,
            gamma: 0.5,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 10,
            il_dagger_mix: 0.5,
            seed: 0,
            resample_perturbations: false,
            max_grad_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(MbaError::Parameter(format!("mu must be non-negative, got {}", self.mu)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(MbaError::Parameter(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.il_dagger_mix) {
            return Err(MbaError::Parameter(format!("il_dagger_mix must lie in [0, 1], got {}", self.il_dagger_mix)));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(MbaError::Parameter("learning rate must be non-negative and momentum in [0, 1)".into()));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(MbaError::Parameter(format!("max grad norm must be non-negative, got {}", self.max_grad_norm)));
        }
        if self.batch_size == 0 {
            return Err(MbaError::Parameter("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Expert action: stop at the goal, otherwise the action node minimizing
/// travel cost from `current` plus geodesic distance to `goal` (ties to the
/// lowest id). `actions` must be sorted by node id.
pub fn dagger_target(g: &WorldGraph, current: NodeId, actions: &[(NodeId, f64)], goal: NodeId) -> Result<Action> {
    if current == goal {
        return Ok(Action::Stop);
    }
    let to_goal = g.distances_from(goal)?;
    let mut best: Option<(NodeId, f64)> = None;
    for &(n, cost) in actions {
        let total = cost + to_goal[n];
        if best.is_none_or(|(_, b)| total < b - TIE_EPS) {
            best = Some((n, total));
        }
    }
    best.map(|(n, _)| Action::Move(n)).ok_or_else(|| MbaError::State(format!("no actions available at node {current}")))
}

/// Targets for one step. A ground-truth action marks a teacher-forced step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSupervision {
    pub gt: Option<Action>,
    pub expert: Action,
}

/// The three loss terms of one episode (or their batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    /// Cross-entropy against ground-truth actions, unweighted.
    pub imitation: f64,
    /// Cross-entropy against expert targets.
    pub dagger: f64,
    /// Cross-entropy of the object prediction.
    pub object: f64,
}

impl LossTerms {
    pub fn total(&self, mu: f64) -> f64 {
        mu * self.imitation + self.dagger + self.object
    }

    fn add(&mut self, o: &LossTerms) {
        self.imitation += o.imitation;
        self.dagger += o.dagger;
        self.object += o.object;
    }

    fn scaled(&self, s: f64) -> LossTerms {
        LossTerms { imitation: self.imitation * s, dagger: self.dagger * s, object: self.object * s }
    }
}

fn target_index(p: &FusedPrediction, a: Action) -> Result<usize> {
    p.index_of(a).ok_or_else(|| MbaError::Alignment(format!("target {a:?} is outside the predicted action space")))
}

/// Per-term loss of one episode. `object` is the object distribution and
/// the index of the goal object, when the object term applies.
pub fn episode_terms(predictions: &[FusedPrediction], supervision: &[StepSupervision], object: Option<(&[f64], usize)>) -> Result<LossTerms> {
    if predictions.len() != supervision.len() {
        return Err(MbaError::Alignment(format!(
            "{} predictions but {} supervision records",
            predictions.len(),
            supervision.len()
        )));
    }
    let mut terms = LossTerms::default();
    for (p, s) in predictions.iter().zip(supervision) {
        match s.gt {
            Some(gt) => terms.imitation -= p.probs[target_index(p, gt)?].ln(),
            None => terms.dagger -= p.probs[target_index(p, s.expert)?].ln(),
        }
    }
    if let Some((probs, t)) = object {
        let p = probs.get(t).ok_or_else(|| MbaError::Alignment("object target out of range".into()))?;
        terms.object = -p.ln();
    }
    Ok(terms)
}

/// `μ · CE(a_gt) + CE(a*) + CE(o_gt)` for one episode.
pub fn episode_loss(predictions: &[FusedPrediction], supervision: &[StepSupervision], object: Option<(&[f64], usize)>, mu: f64) -> Result<f64> {
    Ok(episode_terms(predictions, supervision, object)?.total(mu))
}

pub fn supervision(r: &Rollout) -> Vec<StepSupervision> {
    r.steps.iter().map(|s| StepSupervision { gt: s.gt, expert: s.expert }).collect()
}

/// Index of the goal object in the stop prediction, when the episode
/// stopped at the node that hosts it.
pub fn object_target(r: &Rollout, episode: &Episode) -> Option<usize> {
    let obj = r.object.as_ref()?;
    obj.object_ids.iter().position(|&id| id == episode.goal_object)
}

/// Loss of a finished rollout.
pub fn rollout_terms(r: &Rollout, episode: &Episode) -> Result<LossTerms> {
    let predictions: Vec<FusedPrediction> = r
        .steps
        .iter()
        .map(|s| s.prediction.clone().ok_or_else(|| MbaError::State("rollout has no predictions".into())))
        .collect::<Result<_>>()?;
    let object = match (object_target(r, episode), &r.object) {
        (Some(t), Some(o)) => Some((o.probs.as_slice(), t)),
        _ => None,
    };
    episode_terms(&predictions, &supervision(r), object)
}

/// Accumulates the gradient of the rollout's loss into `grad` and returns
/// its terms. The rollout must have been run with caches kept.
pub fn backprop_rollout(agent: &Agent, r: &Rollout, episode: &Episode, mu: f64, grad: &mut Agent) -> Result<LossTerms> {
    let terms = rollout_terms(r, episode)?;
    let last = r.steps.len().checked_sub(1).ok_or_else(|| MbaError::State("empty rollout".into()))?;
    let mut d_object_token = None;
    if let (Some(t), Some(obj)) = (object_target(r, episode), &r.object) {
        let cache = obj.cache.as_ref().ok_or_else(|| MbaError::State("object cache was not kept".into()))?;
        let mut d = vec![0.0; obj.probs.len()];
        d[t] = -1.0 / obj.probs[t];
        d_object_token = Some(agent.object_backward(cache, &d, grad)?);
    }
    for (i, s) in r.steps.iter().enumerate() {
        let p = s.prediction.as_ref().expect("checked by rollout_terms");
        let cache = s.cache.as_ref().ok_or_else(|| MbaError::State("step cache was not kept".into()))?;
        let (target, weight) = match s.gt {
            Some(gt) => (gt, mu),
            None => (s.expert, 1.0),
        };
        let t = target_index(p, target)?;
        let mut d = vec![0.0; p.probs.len()];
        d[t] = -weight / p.probs[t];
        let extra = if i == last { d_object_token.as_ref() } else { None };
        agent.step_backward(p, cache, &d, extra, grad)?;
    }
    Ok(terms)
}

/// Rollout mode used for episode `index` of `epoch`.
pub fn training_policy(cfg: &TrainConfig, epoch: usize, index: usize) -> Policy {
    let mut rng = seed::rng(cfg.seed, "rollout-mode", &[epoch as u64, index as u64]);
    if rng.random::<f64>() < cfg.il_dagger_mix {
        Policy::Teacher
    } else {
        Policy::Sample(seed::derive(cfg.seed, "student", &[epoch as u64, index as u64]))
    }
}

/// Runs one training rollout and returns its loss terms and gradient.
pub fn episode_gradient(agent: &Agent, scene: &Scene, episode: &Episode, policy: Policy, salt: u64, mu: f64) -> Result<(LossTerms, Agent)> {
    let opts = RolloutOptions { policy, salt, keep_caches: true };
    let r = rollout(agent, scene, episode, &opts)?;
    let mut grad = zeros_like(agent);
    let terms = backprop_rollout(agent, &r, episode, mu, &mut grad)?;
    Ok((terms, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Batch-mean teacher-forced term, before the `μ` weight.
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
    /// Greedy success rate on the training episodes after the epoch.
    pub train_sr: f64,
}

/// An episode to train on and the index of its scene.
#[derive(Clone, Debug)]
pub struct TrainingEpisode {
    pub scene: usize,
    pub episode: Episode,
}

/// SGD with momentum over mini-batches of whole rollouts.
pub fn train(agent: &mut Agent, scenes: &[Scene], episodes: &[TrainingEpisode], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(MbaError::Parameter("no training episodes".into()));
    }
    if let Some(bad) = episodes.iter().find(|e| e.scene >= scenes.len()) {
        return Err(MbaError::Lookup { kind: "scene", id: bad.scene });
    }
    let mut velocity = vec![0.0; flatten(agent).len()];
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..episodes.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, "shuffle", &[epoch as u64]));
        let salt = if cfg.resample_perturbations { epoch as u64 + 1 } else { 0 };
        let mut epoch_terms = LossTerms::default();
        for batch in order.chunks(cfg.batch_size) {
            let snapshot: &Agent = agent;
            let results: Vec<Result<(LossTerms, Agent)>> = batch
                .par_iter()
                .map(|&i| {
                    let e = &episodes[i];
                    let policy = training_policy(cfg, epoch, i);
                    episode_gradient(snapshot, &scenes[e.scene], &e.episode, policy, salt, cfg.mu)
                })
                .collect();
            let mut sum = vec![0.0; velocity.len()];
            let mut batch_terms = LossTerms::default();
            for (&i, res) in batch.iter().zip(results) {
                let (terms, grad) = res?;
                let loss = terms.total(cfg.mu);
                if !loss.is_finite() {
                    return Err(MbaError::Numeric(format!(
                        "loss {loss} in epoch {epoch} on episode {} (terms {:?})",
                        episodes[i].episode.episode_id, terms
                    )));
                }
                batch_terms.add(&terms);
                for (s, gv) in sum.iter_mut().zip(flatten(&grad)) {
                    *s += gv;
                }
            }
            let n = batch.len() as f64;
            let norm = sum.iter().map(|g| g * g).sum::<f64>().sqrt() / n;
            let clip = if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm { cfg.max_grad_norm / norm } else { 1.0 };
            let mut params = flatten(agent);
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&sum) {
                *v = cfg.momentum * *v + clip * g / n;
                *p -= cfg.learning_rate * *v;
            }
            unflatten(agent, &params);
            epoch_terms.add(&batch_terms);
        }
        let mean = epoch_terms.scaled(1.0 / episodes.len() as f64);
        let train_sr = success_rate(agent, scenes, episodes)?;
        log.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: mean.total(cfg.mu),
            term1: mean.imitation,
            term2: mean.dagger,
            term3: mean.object,
            train_sr,
        });
    }
    Ok(log)
}

/// Greedy success rate over `episodes`.
pub fn success_rate(agent: &Agent, scenes: &[Scene], episodes: &[TrainingEpisode]) -> Result<f64> {
    let hits: Vec<Result<bool>> = episodes
        .par_iter()
        .map(|e| {
            let scene = &scenes[e.scene];
            let r = rollout(agent, scene, &e.episode, &RolloutOptions::new(Policy::Greedy))?;
            crate::metrics::is_success(scene.graph(), r.final_node(), e.episode.goal)
        })
        .collect();
    let mut n = 0usize;
    for h in hits {
        n += usize::from(h?);
    }
    Ok(n as f64 / episodes.len() as f64)
}

/// Gradient of the batch-mean loss over the given rollouts, for tests that
/// compare against finite differences.
pub fn batch_gradient(agent: &Agent, scenes: &[Scene], batch: &[(TrainingEpisode, Policy)], mu: f64) -> Result<(f64, Agent)> {
    let mut grad = zeros_like(agent);
    let mut total = 0.0;
    for (e, policy) in batch {
        let (terms, g) = episode_gradient(agent, &scenes[e.scene], &e.episode, *policy, 0, mu)?;
        total += terms.total(mu);
        add_assign(&mut grad, &g);
    }
    let n = batch.len() as f64;
    scale(&mut grad, 1.0 / n);
    Ok((total / n, grad))
}

/// Batch-mean loss only.
pub fn batch_loss(agent: &Agent, scenes: &[Scene], batch: &[(TrainingEpisode, Policy)], mu: f64) -> Result<f64> {
    let mut total = 0.0;
    for (e, policy) in batch {
        let opts = RolloutOptions { policy: *policy, salt: 0, keep_caches: false };
        let r = rollout(agent, &scenes[e.scene], &e.episode, &opts)?;
        total += rollout_terms(&r, &e.episode)?.total(mu);
    }
    Ok(total / batch.len() as f64)
}
