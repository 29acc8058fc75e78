//! The multi-branch policy: per-branch encoders and scorers, learnable
//! branch weights, dynamic fusion of local and global predictions, and the
//! object grounding head.

pub mod branch;
mod checkpoint;
pub mod config;
pub mod fusion;
pub mod grounding;
pub mod rollout;

use ndarray::{Array1, ArrayView1};

use crate::error::{MbaError, Result};
use crate::features::{PanoramaFeatures, PerturbationSpec};
use crate::neural::{DenseLayer, FeedForwardNet, Parameters};
use crate::seed;
use crate::topomap::TopoMap;
use crate::world::{NodeId, WorldGraph};

pub use branch::{branch_scores, global_branch, local_branch, BranchOutput, BranchParams};
pub use config::{AgentConfig, BranchConfig, Role, Scope, Slot};
pub use fusion::{aggregate, branch_weights, dynamic_fuse, predict_objects, FusedPrediction, ObjectHead};
pub use rollout::{rollout, Policy, Rollout, RolloutOptions, Scene, StepRecord};

use branch::{encode, encode_backward, global_input, local_input, score, score_backward, EncodeCache, ScoreCache};
use fusion::{fuse_backward, fuse_forward, mixture, mixture_backward, objects_backward, objects_forward, weights_backward, weights_forward};
use fusion::{FuseCache, ObjectCache, WeightCache};
use grounding::Grounding;

pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Stop,
    Move(NodeId),
}

impl Action {
    pub fn node(self) -> Option<NodeId> {
        match self {
            Action::Stop => None,
            Action::Move(n) => Some(n),
        }
    }
}

/// Agent weights plus the slot layout they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    config: AgentConfig,
    slots: Vec<Slot>,
    branch_of: Vec<usize>,
    pub branches: Vec<BranchParams>,
    /// One per active slot; present for depth branches only.
    pub depth_projections: Vec<Option<DenseLayer>>,
    pub weight_net: FeedForwardNet,
    /// Present when the config has both local and global branches.
    pub gate_net: Option<FeedForwardNet>,
    pub object_head: ObjectHead,
    /// Subtracted from every instruction before encoding; a fitted input
    /// statistic, not a trained weight.
    instruction_center: Vec<f64>,
    grounding: Grounding,
}

impl Agent {
    pub fn new(config: AgentConfig) -> Result<Self> {
        config.validate()?;
        let mut config = config;
        config.branches = config.branches.with_default_gamma(DEFAULT_GAMMA);
        let slots = config.branches.slots();
        let mut rng = seed::rng(config.init_seed, "agent-init", &[]);
        let (f, w, h, ffn) = (config.feature_dim, config.instruction_dim, config.hidden_dim, config.ffn_hidden);
        let mut branches = Vec::new();
        let mut branch_of = Vec::new();
        let mut depth_projections = Vec::new();
        for (i, &slot) in slots.iter().enumerate() {
            let shared = config.share_branch_params && slot.role() == Role::Ancillary;
            let base = slots[..i].iter().position(|s| s.scope() == slot.scope() && s.role() == Role::Base);
            match base.filter(|_| shared) {
                Some(j) => branch_of.push(branch_of[j]),
                None => {
                    branch_of.push(branches.len());
                    branches.push(BranchParams::new(f, w, h, ffn, &mut rng));
                }
            }
            let depth = config.branches.spec(slot) == Some(PerturbationSpec::Depth);
            depth_projections.push(depth.then(|| DenseLayer::new(config.depth_dim, f, &mut rng)));
        }
        let k = slots.len();
        let weight_net = FeedForwardNet::new(k * h, ffn, k, &mut rng);
        let gate_net = (config.branches.has_scope(Scope::Local) && config.branches.has_scope(Scope::Global))
            .then(|| FeedForwardNet::new(2 * h, ffn, 1, &mut rng));
        // object rows carry their instruction match as a final column
        let object_head = ObjectHead::new(config.object_dim + 1, w, h, ffn, &mut rng);
        let grounding = Grounding::new(w, f, config.object_dim);
        let instruction_center = vec![0.0; w];
        Ok(Self { config, slots, branch_of, branches, depth_projections, weight_net, gate_net, object_head, instruction_center, grounding })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    /// Active slots in weight-network order.
    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn spec(&self, i: usize) -> PerturbationSpec {
        self.config.branches.spec(self.slots[i]).expect("active slot has a spec")
    }

    pub fn has_global(&self) -> bool {
        self.config.branches.has_scope(Scope::Global)
    }

    pub fn branch_params(&self, i: usize) -> &BranchParams {
        &self.branches[self.branch_of[i]]
    }

    pub fn instruction_center(&self) -> &[f64] {
        &self.instruction_center
    }

    pub fn set_instruction_center(&mut self, center: Vec<f64>) -> Result<()> {
        if center.len() != self.config.instruction_dim || center.iter().any(|c| !c.is_finite()) {
            return Err(MbaError::Configuration(format!(
                "instruction center needs {} finite entries, got {}",
                self.config.instruction_dim,
                center.len()
            )));
        }
        self.instruction_center = center;
        Ok(())
    }

    /// Sets the center to the mean of `instructions`.
    pub fn fit_instruction_center<'a>(&mut self, instructions: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
        let mut sum = vec![0.0; self.config.instruction_dim];
        let mut n = 0usize;
        for w in instructions {
            if w.len() != sum.len() {
                return Err(MbaError::Configuration(format!("instruction of dim {} for a {}-dim agent", w.len(), sum.len())));
            }
            for (s, x) in sum.iter_mut().zip(w) {
                *s += x;
            }
            n += 1;
        }
        if n == 0 {
            return Err(MbaError::Parameter("no instructions to fit a center on".into()));
        }
        self.set_instruction_center(sum.into_iter().map(|s| s / n as f64).collect())
    }

    fn centered(&self, instruction: &[f64]) -> Result<Vec<f64>> {
        if instruction.len() != self.instruction_center.len() {
            return Err(MbaError::Configuration(format!(
                "instruction of dim {} for a {}-dim agent",
                instruction.len(),
                self.instruction_center.len()
            )));
        }
        Ok(instruction.iter().zip(&self.instruction_center).map(|(x, c)| x - c).collect())
    }

    /// One decision step. `panoramas` and `maps` hold one entry per active
    /// slot; every map must already contain the current node.
    pub fn step_forward(&self, instruction: &[f64], obs: &Observation) -> Result<(FusedPrediction, StepCache)> {
        let k = self.slots.len();
        if obs.panoramas.len() != k || obs.maps.len() != k {
            return Err(MbaError::Consistency(format!("{k} branches but {} panoramas", obs.panoramas.len())));
        }
        let target = self.grounding.target(instruction)?;
        let instruction = self.centered(instruction)?;
        let mut branches = Vec::with_capacity(k);
        for (i, &slot) in self.slots.iter().enumerate() {
            let map = &obs.maps[i];
            // depth carries no appearance to match against the instruction
            let target = (self.spec(i) != PerturbationSpec::Depth).then_some(&target);
            let input = match slot.scope() {
                Scope::Local => local_input(&obs.panoramas[i], obs.graph, |n| map.is_visited(n), target)?,
                Scope::Global => global_input(map, obs.graph, target)?,
            };
            let params = self.branch_params(i);
            let (out, encode_cache) = encode(params, self.depth_projections[i].as_ref(), &instruction, &input)?;
            let (probs, score_cache) = score(params, &out)?;
            branches.push(BranchStep { out, encode_cache, probs, score_cache });
        }
        let tokens: Vec<ArrayView1<f64>> = branches.iter().map(|b| b.out.hidden.row(0)).collect();
        let (lambda, weight_cache) = weights_forward(&self.weight_net, &tokens)?;

        let local: Vec<usize> = (0..k).filter(|&i| self.slots[i].scope() == Scope::Local).collect();
        let global: Vec<usize> = (0..k).filter(|&i| self.slots[i].scope() == Scope::Global).collect();
        let local_ids = local.first().map(|&i| branches[i].out.action_ids.clone()).unwrap_or_default();
        let global_ids = match global.first() {
            Some(&i) => branches[i].out.action_ids.clone(),
            None => local_ids.clone(),
        };
        for &i in &global {
            if branches[i].out.action_ids != global_ids {
                return Err(MbaError::Consistency("global branches disagree on the action space".into()));
            }
        }
        let group = |idx: &[usize]| -> Result<Option<Vec<f64>>> {
            if idx.is_empty() {
                return Ok(None);
            }
            let p: Vec<&[f64]> = idx.iter().map(|&i| branches[i].probs.as_slice()).collect();
            let w: Vec<f64> = idx.iter().map(|&i| lambda[i]).collect();
            mixture(&p, &w).map(Some)
        };
        let p_local = group(&local)?;
        let p_global = group(&global)?;
        let gate_input = match self.gate_net {
            Some(_) => Some((mean_rows(&tokens, &global), mean_rows(&tokens, &local))),
            None => None,
        };
        let (probs, sigma, fuse_cache) = fuse_forward(
            p_local.as_deref(),
            p_global.as_deref(),
            &local_ids,
            &global_ids,
            gate_input.as_ref().map(|(g, l)| (g.view(), l.view())),
            self.gate_net.as_ref(),
        )?;
        let action_ids = std::iter::once(Action::Stop).chain(global_ids.iter().map(|&n| Action::Move(n))).collect();
        let prediction = FusedPrediction { action_ids, probs, lambda, sigma };
        let cache = StepCache { branches, weight_cache, local, global, p_local, p_global, fuse_cache };
        Ok((prediction, cache))
    }

    /// Backpropagates `d_probs` (gradient on the fused distribution) and an
    /// optional gradient on the mean of all state tokens into `grad`.
    pub fn step_backward(
        &self,
        prediction: &FusedPrediction,
        cache: &StepCache,
        d_probs: &[f64],
        d_mean_token: Option<&Array1<f64>>,
        grad: &mut Agent,
    ) -> Result<()> {
        let k = self.slots.len();
        let fused = fuse_backward(&cache.fuse_cache, cache.p_global.as_deref(), d_probs, self.gate_net.as_ref(), grad.gate_net.as_mut())?;
        let mut d_branch_probs: Vec<Vec<f64>> = cache.branches.iter().map(|b| vec![0.0; b.probs.len()]).collect();
        let mut d_lambda = vec![0.0; k];
        for (idx, mix, d_mix) in [
            (&cache.local, cache.p_local.as_ref(), fused.d_local.as_ref()),
            (&cache.global, cache.p_global.as_ref(), fused.d_global.as_ref()),
        ] {
            let (Some(mix), Some(d_mix)) = (mix, d_mix) else { continue };
            let p: Vec<&[f64]> = idx.iter().map(|&i| cache.branches[i].probs.as_slice()).collect();
            let w: Vec<f64> = idx.iter().map(|&i| prediction.lambda[i]).collect();
            let (d_p, d_w) = mixture_backward(&p, &w, mix, d_mix);
            for ((&i, dp), dw) in idx.iter().zip(d_p).zip(d_w) {
                d_branch_probs[i] = dp;
                d_lambda[i] = dw;
            }
        }
        let mut d_tokens = weights_backward(&self.weight_net, &cache.weight_cache, &d_lambda, &mut grad.weight_net)?;
        if let Some((d_g, d_l)) = fused.d_gate_input {
            for (idx, d) in [(&cache.global, d_g), (&cache.local, d_l)] {
                let share = d / idx.len() as f64;
                for &i in idx {
                    d_tokens[i] += &share;
                }
            }
        }
        if let Some(d) = d_mean_token {
            let share = d / k as f64;
            for t in &mut d_tokens {
                *t += &share;
            }
        }
        for (i, b) in cache.branches.iter().enumerate() {
            let j = self.branch_of[i];
            let params = &self.branches[j];
            let mut d_hidden = score_backward(params, &b.out, &b.probs, &b.score_cache, &d_branch_probs[i], &mut grad.branches[j])?;
            let mut row0 = d_hidden.row_mut(0);
            row0 += &d_tokens[i];
            encode_backward(
                params,
                self.depth_projections[i].as_ref(),
                &b.encode_cache,
                d_hidden.view(),
                &mut grad.branches[j],
                grad.depth_projections[i].as_mut(),
            )?;
        }
        Ok(())
    }

    /// Object distribution at a stop, grounded on the mean state token.
    pub fn object_forward(&self, cache: &StepCache, objects: &[&[f64]], instruction: &[f64]) -> Result<(Vec<f64>, ObjectCache)> {
        let token = cache.mean_token();
        let target = self.grounding.target(instruction)?;
        let rows: Vec<Vec<f64>> = objects
            .iter()
            .map(|o| o.iter().copied().chain(std::iter::once(target.object_match(o))).collect())
            .collect();
        let rows: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        objects_forward(&self.object_head, token.view(), &rows, &self.centered(instruction)?)
    }

    /// Returns the gradient on the mean state token.
    pub fn object_backward(&self, cache: &ObjectCache, d_probs: &[f64], grad: &mut Agent) -> Result<Array1<f64>> {
        objects_backward(&self.object_head, cache, d_probs, &mut grad.object_head)
    }
}

fn mean_rows(tokens: &[ArrayView1<f64>], idx: &[usize]) -> Array1<f64> {
    let mut acc = Array1::zeros(tokens[idx[0]].len());
    for &i in idx {
        acc += &tokens[i];
    }
    acc / idx.len() as f64
}

impl Parameters for Agent {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (j, b) in self.branches.iter().enumerate() {
            let owner = self.branch_of.iter().position(|&x| x == j).expect("every branch has an owner");
            b.visit(&format!("{prefix}branch.{}", self.slots[owner].label()), f);
        }
        for (i, d) in self.depth_projections.iter().enumerate() {
            if let Some(d) = d {
                d.visit(&format!("{prefix}depth.{}", self.slots[i].label()), f);
            }
        }
        self.weight_net.visit(&format!("{prefix}weights"), f);
        if let Some(gate) = &self.gate_net {
            gate.visit(&format!("{prefix}gate"), f);
        }
        self.object_head.visit(&format!("{prefix}object"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let labels: Vec<&str> = (0..self.branches.len())
            .map(|j| self.slots[self.branch_of.iter().position(|&x| x == j).expect("owner")].label())
            .collect();
        for (b, label) in self.branches.iter_mut().zip(labels) {
            b.visit_mut(&format!("{prefix}branch.{label}"), f);
        }
        for (i, d) in self.depth_projections.iter_mut().enumerate() {
            if let Some(d) = d {
                d.visit_mut(&format!("{prefix}depth.{}", self.slots[i].label()), f);
            }
        }
        self.weight_net.visit_mut(&format!("{prefix}weights"), f);
        if let Some(gate) = &mut self.gate_net {
            gate.visit_mut(&format!("{prefix}gate"), f);
        }
        self.object_head.visit_mut(&format!("{prefix}object"), f);
    }
}

/// What the agent perceives at one decision step.
pub struct Observation<'a> {
    pub graph: &'a WorldGraph,
    pub panoramas: &'a [PanoramaFeatures],
    pub maps: &'a [TopoMap],
}

#[derive(Clone, Debug)]
struct BranchStep {
    out: BranchOutput,
    encode_cache: EncodeCache,
    probs: Vec<f64>,
    score_cache: ScoreCache,
}

/// Intermediate values of one step, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct StepCache {
    branches: Vec<BranchStep>,
    weight_cache: WeightCache,
    local: Vec<usize>,
    global: Vec<usize>,
    p_local: Option<Vec<f64>>,
    p_global: Option<Vec<f64>>,
    fuse_cache: FuseCache,
}

impl StepCache {
    pub fn branch_outputs(&self) -> impl Iterator<Item = &BranchOutput> {
        self.branches.iter().map(|b| &b.out)
    }

    pub fn branch_probs(&self, i: usize) -> &[f64] {
        &self.branches[i].probs
    }

    pub fn mean_token(&self) -> Array1<f64> {
        let mut acc = Array1::zeros(self.branches[0].out.hidden.ncols());
        for b in &self.branches {
            acc += &b.out.hidden.row(0);
        }
        acc / self.branches.len() as f64
    }
}
