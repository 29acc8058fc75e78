//! Running an agent through an episode.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use super::fusion::ObjectCache;
use super::{Action, Agent, FusedPrediction, Observation, StepCache};
use crate::error::{MbaError, Result};
use crate::features::{depth_features, incongruent_source, original_features, perturbed_view, random_noise, PanoramaFeatures, PerturbationSpec};
use crate::seed;
use crate::topomap::{TopoMap, TrajectoryStep};
use crate::training::dagger_target;
use crate::world::{Episode, NodeId, WorldGraph};

/// A world together with its precomputed original (and optionally depth)
/// panoramas.
#[derive(Clone, Debug)]
pub struct Scene {
    graph: WorldGraph,
    originals: Vec<PanoramaFeatures>,
    depth: Option<(usize, Vec<PanoramaFeatures>)>,
}

impl Scene {
    pub fn new(graph: WorldGraph) -> Result<Self> {
        let originals = (0..graph.len()).map(|n| original_features(&graph, n, graph.seed())).collect::<Result<_>>()?;
        Ok(Self { graph, originals, depth: None })
    }

    pub fn with_depth(mut self, depth_dim: usize) -> Result<Self> {
        let depth = (0..self.graph.len()).map(|n| depth_features(&self.graph, n, depth_dim)).collect::<Result<_>>()?;
        self.depth = Some((depth_dim, depth));
        Ok(self)
    }

    pub fn graph(&self) -> &WorldGraph {
        &self.graph
    }

    pub fn original(&self, n: NodeId) -> &PanoramaFeatures {
        &self.originals[n]
    }

    /// Panorama at `n` as seen by a branch with strategy `spec`. Perturbed
    /// and noise inputs are drawn from `(episode_seed, salt)`, so they stay
    /// fixed within an episode; noise is also keyed by the branch index.
    pub fn panorama(&self, spec: PerturbationSpec, n: NodeId, depth_dim: usize, episode_seed: u64, salt: u64, branch: usize) -> Result<PanoramaFeatures> {
        let g = &self.graph;
        g.node(n)?;
        let original = &self.originals[n];
        match spec {
            PerturbationSpec::Original => Ok(original.clone()),
            PerturbationSpec::Depth => match &self.depth {
                Some((dim, depth)) if *dim == depth_dim => Ok(depth[n].clone()),
                _ => depth_features(g, n, depth_dim),
            },
            PerturbationSpec::Perturbed(gamma) => {
                let gamma = gamma.unwrap_or(super::DEFAULT_GAMMA);
                let stream = seed::derive(episode_seed, "incongruent-episode", &[salt]);
                let mut views = Vec::with_capacity(original.views.len());
                for (v, view) in original.views.iter().enumerate() {
                    let (source, slot) = incongruent_source(g, n, v, stream)?;
                    views.push(perturbed_view(view, &self.originals[source].views[slot], gamma)?);
                }
                Ok(PanoramaFeatures { views, ..original.clone() })
            }
            PerturbationSpec::RandomNoise => {
                let mut rng = seed::rng(episode_seed, "noise", &[salt, branch as u64, n as u64]);
                let dim = original.dim();
                let views = original.views.iter().map(|_| random_noise(dim, &mut rng)).collect();
                Ok(PanoramaFeatures { views, ..original.clone() })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    /// Highest fused probability.
    Greedy,
    /// Categorical draw from the fused distribution with the given seed.
    Sample(u64),
    /// Follow the ground-truth path.
    Teacher,
    /// Follow the expert target; the network is not evaluated.
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutOptions {
    pub policy: Policy,
    /// Selects a fresh draw of perturbations; 0 for evaluation.
    pub salt: u64,
    /// Keep per-step caches for backpropagation.
    pub keep_caches: bool,
}

impl RolloutOptions {
    pub fn new(policy: Policy) -> Self {
        Self { policy, salt: 0, keep_caches: false }
    }
}

/// One decision.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub current: NodeId,
    pub action: Action,
    /// Expert target at this step.
    pub expert: Action,
    /// Ground-truth action; set on teacher-forced steps only.
    pub gt: Option<Action>,
    pub prediction: Option<FusedPrediction>,
    pub cache: Option<StepCache>,
    pub visited: Vec<NodeId>,
    pub ghosts: Vec<NodeId>,
}

/// Object prediction made at a stop.
#[derive(Clone, Debug)]
pub struct ObjectStep {
    pub object_ids: Vec<usize>,
    pub probs: Vec<f64>,
    pub cache: Option<ObjectCache>,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub episode_id: u64,
    /// Every node passed, including intermediate nodes of map traversals.
    pub trajectory: Vec<NodeId>,
    pub steps: Vec<StepRecord>,
    pub stopped: bool,
    pub predicted_object: Option<usize>,
    pub object: Option<ObjectStep>,
}

impl Rollout {
    pub fn final_node(&self) -> NodeId {
        *self.trajectory.last().expect("trajectory starts at the start node")
    }

    pub fn trace(&self) -> Vec<TrajectoryStep> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| TrajectoryStep {
                episode_id: self.episode_id,
                step: i,
                current: s.current,
                visited: s.visited.clone(),
                ghosts: s.ghosts.clone(),
                action: s.action.node(),
            })
            .collect()
    }
}

/// Candidate action nodes with their travel cost from `current`: map action
/// nodes for agents with a global branch, adjacent nodes otherwise.
pub fn action_costs(agent: &Agent, map: &TopoMap, g: &WorldGraph, current: NodeId) -> Result<Vec<(NodeId, f64)>> {
    if agent.has_global() {
        let dist = map.distances_from(current, g)?;
        Ok(map.action_nodes().into_iter().map(|n| (n, dist[n])).collect())
    } else {
        Ok(g.neighbors(current)?.to_vec())
    }
}

/// Runs `agent` on `episode` from its start node until it stops or the step
/// budget runs out.
pub fn rollout(agent: &Agent, scene: &Scene, episode: &Episode, opts: &RolloutOptions) -> Result<Rollout> {
    let g = scene.graph();
    g.node(episode.start)?;
    g.node(episode.goal)?;
    let k = agent.slots().len();
    let depth_dim = agent.config().depth_dim;
    let mut maps = vec![TopoMap::new(); k];
    let mut current = episode.start;
    let mut trajectory = vec![current];
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut stopped = false;
    let mut last_cache: Option<StepCache> = None;
    let mut sampler = match opts.policy {
        Policy::Sample(s) => Some(seed::rng(s, "rollout-sample", &[episode.seed])),
        _ => None,
    };

    for step in 0..episode.max_steps {
        let panoramas = (0..k)
            .map(|i| scene.panorama(agent.spec(i), current, depth_dim, episode.seed, opts.salt, i))
            .collect::<Result<Vec<_>>>()?;
        for (map, pano) in maps.iter_mut().zip(&panoramas) {
            map.update(current, pano, g)?;
        }
        let nav = &maps[0];
        let expert = dagger_target(g, current, &action_costs(agent, nav, g, current)?, episode.goal)?;
        let gt = match opts.policy {
            Policy::Teacher => Some(teacher_action(episode, step, current)?),
            _ => None,
        };
        let (prediction, cache) = if opts.policy == Policy::Oracle {
            (None, None)
        } else {
            let obs = Observation { graph: g, panoramas: &panoramas, maps: &maps };
            let (p, c) = agent.step_forward(&episode.instruction, &obs)?;
            (Some(p), Some(c))
        };
        let action = match (opts.policy, &prediction) {
            (Policy::Oracle, _) => expert,
            (Policy::Teacher, _) => gt.expect("teacher action"),
            (Policy::Greedy, Some(p)) => p.argmax(),
            (Policy::Sample(_), Some(p)) => {
                let dist = WeightedIndex::new(&p.probs).map_err(|e| MbaError::Sampling(e.to_string()))?;
                p.action_ids[dist.sample(sampler.as_mut().expect("sampler"))]
            }
            _ => unreachable!("network policies always predict"),
        };
        if let Some(p) = &prediction {
            if p.index_of(action).is_none() {
                return Err(MbaError::State(format!("action {action:?} is outside the action space")));
            }
        }
        steps.push(StepRecord {
            current,
            action,
            expert,
            gt,
            prediction,
            cache: if opts.keep_caches { cache.clone() } else { None },
            visited: nav.visited().collect(),
            ghosts: nav.ghosts().collect(),
        });
        last_cache = cache;
        match action {
            Action::Stop => {
                stopped = true;
                break;
            }
            Action::Move(target) => {
                if g.is_adjacent(current, target) {
                    trajectory.push(target);
                } else {
                    let (path, _) = maps[0].path(current, target, g)?;
                    trajectory.extend_from_slice(&path[1..]);
                }
                current = target;
            }
        }
    }

    let mut predicted_object = None;
    let mut object = None;
    if stopped {
        let objects = &g.node(current)?.objects;
        if opts.policy == Policy::Oracle {
            predicted_object = objects.iter().map(|o| o.object_id).find(|&id| id == episode.goal_object);
        } else if !objects.is_empty() {
            let features: Vec<&[f64]> = objects.iter().map(|o| o.feature.as_slice()).collect();
            let cache = last_cache.as_ref().expect("a stop follows a forward pass");
            let (probs, ocache) = agent.object_forward(cache, &features, &episode.instruction)?;
            let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
            predicted_object = Some(objects[best].object_id);
            object = Some(ObjectStep {
                object_ids: objects.iter().map(|o| o.object_id).collect(),
                probs,
                cache: opts.keep_caches.then_some(ocache),
            });
        }
    }
    Ok(Rollout { episode_id: episode.episode_id, trajectory, steps, stopped, predicted_object, object })
}

fn teacher_action(episode: &Episode, step: usize, current: NodeId) -> Result<Action> {
    if episode.gt_path.get(step) != Some(&current) {
        return Err(MbaError::State(format!("teacher left the ground-truth path at step {step}")));
    }
    Ok(match episode.gt_path.get(step + 1) {
        Some(&next) => Action::Move(next),
        None => Action::Stop,
    })
}
