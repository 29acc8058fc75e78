//! Branch weighting, score aggregation, dynamic fusion and object grounding.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::Action;
use crate::error::{MbaError, Result};
use crate::neural::{sigmoid, softmax, softmax_backward, DenseLayer, FeedForwardNet, FfnCache, Parameters};
use crate::world::NodeId;

#[derive(Clone, Debug)]
pub struct WeightCache {
    input: Array2<f64>,
    ffn: FfnCache,
    squashed: Vec<f64>,
    lambda: Vec<f64>,
}

/// `λ = Softmax(Sigmoid(FFN([ℬ₀ of every branch])))`, tokens in slot order.
pub fn weights_forward(net: &FeedForwardNet, tokens: &[ArrayView1<f64>]) -> Result<(Vec<f64>, WeightCache)> {
    if tokens.is_empty() {
        return Err(MbaError::Configuration("branch weights need at least one branch".into()));
    }
    if net.output_dim() != tokens.len() {
        return Err(MbaError::Configuration(format!(
            "weight network is built for {} branches, got {}",
            net.output_dim(),
            tokens.len()
        )));
    }
    let views: Vec<ArrayView2<f64>> = tokens.iter().map(|t| t.view().insert_axis(Axis(0))).collect();
    let input = concatenate(Axis(1), &views).map_err(|e| MbaError::Configuration(e.to_string()))?;
    let (out, ffn) = net.forward(input.view())?;
    let squashed: Vec<f64> = out.iter().map(|&z| sigmoid(z)).collect();
    let lambda = softmax(&squashed)?;
    Ok((lambda.clone(), WeightCache { input, ffn, squashed, lambda }))
}

/// Returns `dL/dℬ₀` per branch.
pub fn weights_backward(
    net: &FeedForwardNet,
    cache: &WeightCache,
    d_lambda: &[f64],
    grad: &mut FeedForwardNet,
) -> Result<Vec<Array1<f64>>> {
    let d_squashed = softmax_backward(&cache.lambda, d_lambda);
    let d_out: Vec<f64> = d_squashed.iter().zip(&cache.squashed).map(|(d, s)| d * s * (1.0 - s)).collect();
    let d_out = Array2::from_shape_vec((1, d_out.len()), d_out).expect("row");
    let d_in = net.backward(cache.input.view(), &cache.ffn, d_out.view(), grad)?;
    let width = d_in.ncols() / cache.lambda.len();
    Ok((0..cache.lambda.len()).map(|i| d_in.slice(s![0, i * width..(i + 1) * width]).to_owned()).collect())
}

/// Branch weights for the given state tokens.
pub fn branch_weights(state_tokens: &[ArrayView1<f64>], net: &FeedForwardNet) -> Result<Vec<f64>> {
    Ok(weights_forward(net, state_tokens)?.0)
}

/// `Σ λ_b P_b / Σ λ_b` over branches that share an action space.
pub fn mixture(probs: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = probs.first() else {
        return Err(MbaError::Configuration("mixture of zero branches".into()));
    };
    if probs.len() != weights.len() {
        return Err(MbaError::Consistency("one weight per branch distribution expected".into()));
    }
    if probs.iter().any(|p| p.len() != first.len()) {
        return Err(MbaError::Consistency("branches disagree on the action space".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; first.len()];
    for (p, w) in probs.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(p.iter()) {
            *o += w * v;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

/// Gradients of [`mixture`] with respect to each branch distribution and
/// each weight.
pub fn mixture_backward(probs: &[&[f64]], weights: &[f64], mix: &[f64], d_mix: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let total: f64 = weights.iter().sum();
    let base: f64 = mix.iter().zip(d_mix).map(|(a, b)| a * b).sum();
    let d_probs = weights.iter().map(|w| d_mix.iter().map(|d| d * w / total).collect()).collect();
    let d_weights = probs
        .iter()
        .map(|p| (p.iter().zip(d_mix).map(|(a, b)| a * b).sum::<f64>() - base) / total)
        .collect();
    (d_probs, d_weights)
}

/// Aggregated local and global distributions. `scopes[i]` tells whether
/// branch `i` is global.
pub fn aggregate(branch_probs: &[&[f64]], lambda: &[f64], is_global: &[bool]) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let pick = |global: bool| -> Result<Option<Vec<f64>>> {
        let (p, w): (Vec<&[f64]>, Vec<f64>) = branch_probs
            .iter()
            .zip(lambda)
            .zip(is_global)
            .filter(|(_, &g)| g == global)
            .map(|((p, w), _)| (*p, *w))
            .unzip();
        if p.is_empty() {
            Ok(None)
        } else {
            mixture(&p, &w).map(Some)
        }
    };
    Ok((pick(false)?, pick(true)?))
}

/// Combined prediction over `{stop} ∪` the global action space.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedPrediction {
    pub action_ids: Vec<Action>,
    pub probs: Vec<f64>,
    /// Branch weights in slot order.
    pub lambda: Vec<f64>,
    /// Gate toward the global distribution; `None` when only one scope exists.
    pub sigma: Option<f64>,
}

impl FusedPrediction {
    /// Highest-probability action; ties go to the lowest index (stop first).
    pub fn argmax(&self) -> Action {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        self.action_ids[best]
    }

    pub fn index_of(&self, a: Action) -> Option<usize> {
        self.action_ids.iter().position(|&x| x == a)
    }
}

/// Positions of the local candidates inside the global action list
/// (`global_ids` excludes stop, so results are offset by one).
pub fn embed_positions(local_ids: &[NodeId], global_ids: &[NodeId]) -> Result<Vec<usize>> {
    let mut out = vec![0];
    for &n in local_ids {
        let i = global_ids.binary_search(&n).map_err(|_| MbaError::Coverage(n))?;
        out.push(i + 1);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FuseCache {
    gate: Option<(Array2<f64>, FfnCache, f64)>,
    embedded_local: Option<Vec<f64>>,
    positions: Vec<usize>,
}

/// Gate input is `[mean global ℬ₀ ; mean local ℬ₀]`.
pub fn fuse_forward(
    local: Option<&[f64]>,
    global: Option<&[f64]>,
    local_ids: &[NodeId],
    global_ids: &[NodeId],
    gate_input: Option<(ArrayView1<f64>, ArrayView1<f64>)>,
    gate_net: Option<&FeedForwardNet>,
) -> Result<(Vec<f64>, Option<f64>, FuseCache)> {
    let width = global_ids.len() + 1;
    let positions = embed_positions(local_ids, global_ids)?;
    let embedded_local = match local {
        Some(p) => {
            if p.len() != positions.len() {
                return Err(MbaError::Consistency("local distribution does not match its candidates".into()));
            }
            let mut e = vec![0.0; width];
            for (&i, &v) in positions.iter().zip(p) {
                e[i] = v;
            }
            Some(e)
        }
        None => None,
    };
    if let Some(p) = global {
        if p.len() != width {
            return Err(MbaError::Consistency("global distribution does not match the map".into()));
        }
    }
    let (mut fused, gate) = match (embedded_local.as_ref(), global) {
        (Some(l), Some(g)) => {
            let (gs, ls) = gate_input.ok_or_else(|| MbaError::Configuration("fusion gate needs state tokens".into()))?;
            let net = gate_net.ok_or_else(|| MbaError::Configuration("fusion gate network missing".into()))?;
            let input = concatenate(Axis(0), &[gs, ls]).map_err(|e| MbaError::Configuration(e.to_string()))?.insert_axis(Axis(0));
            let (z, cache) = net.forward(input.view())?;
            let sigma = sigmoid(z[[0, 0]]);
            let fused = g.iter().zip(l).map(|(a, b)| sigma * a + (1.0 - sigma) * b).collect();
            (fused, Some((input, cache, sigma)))
        }
        (Some(l), None) => (l.clone(), None),
        (None, Some(g)) => (g.to_vec(), None),
        (None, None) => return Err(MbaError::Configuration("nothing to fuse".into())),
    };
    // both parts are distributions, so this only removes rounding drift and
    // contributes nothing to the gradient
    let total: f64 = fused.iter().sum();
    fused.iter_mut().for_each(|v| *v /= total);
    let sigma = gate.as_ref().map(|g| g.2);
    Ok((fused, sigma, FuseCache { gate, embedded_local, positions }))
}

pub struct FuseGrads {
    pub d_local: Option<Vec<f64>>,
    pub d_global: Option<Vec<f64>>,
    /// `dL/d(mean global ℬ₀)`, `dL/d(mean local ℬ₀)`
    pub d_gate_input: Option<(Array1<f64>, Array1<f64>)>,
}

pub fn fuse_backward(
    cache: &FuseCache,
    global: Option<&[f64]>,
    d_fused: &[f64],
    gate_net: Option<&FeedForwardNet>,
    gate_grad: Option<&mut FeedForwardNet>,
) -> Result<FuseGrads> {
    let gather = |d: &[f64]| cache.positions.iter().map(|&i| d[i]).collect::<Vec<f64>>();
    match (&cache.gate, cache.embedded_local.as_ref(), global) {
        (Some((input, ffn, sigma)), Some(l), Some(g)) => {
            let sigma = *sigma;
            let d_global: Vec<f64> = d_fused.iter().map(|d| sigma * d).collect();
            let d_embedded: Vec<f64> = d_fused.iter().map(|d| (1.0 - sigma) * d).collect();
            let d_sigma: f64 = d_fused.iter().zip(g.iter().zip(l)).map(|(d, (a, b))| d * (a - b)).sum();
            let dz = Array2::from_elem((1, 1), d_sigma * sigma * (1.0 - sigma));
            let net = gate_net.expect("gate network present when gated");
            let grad = gate_grad.expect("gate gradient present when gated");
            let d_in = net.backward(input.view(), ffn, dz.view(), grad)?;
            let h = d_in.ncols() / 2;
            Ok(FuseGrads {
                d_local: Some(gather(&d_embedded)),
                d_global: Some(d_global),
                d_gate_input: Some((d_in.slice(s![0, ..h]).to_owned(), d_in.slice(s![0, h..]).to_owned())),
            })
        }
        (None, Some(_), None) => Ok(FuseGrads { d_local: Some(gather(d_fused)), d_global: None, d_gate_input: None }),
        (None, None, Some(_)) => Ok(FuseGrads { d_local: None, d_global: Some(d_fused.to_vec()), d_gate_input: None }),
        _ => Err(MbaError::State("fusion cache does not match the inputs".into())),
    }
}

/// Fuses aggregated local and global distributions.
pub fn dynamic_fuse(
    p_local: Option<&[f64]>,
    p_global: Option<&[f64]>,
    local_ids: &[NodeId],
    global_ids: &[NodeId],
    stop_tokens: Option<(ArrayView1<f64>, ArrayView1<f64>)>,
    gate_net: Option<&FeedForwardNet>,
    lambda: Vec<f64>,
) -> Result<FusedPrediction> {
    let (probs, sigma, _) = fuse_forward(p_local, p_global, local_ids, global_ids, stop_tokens, gate_net)?;
    let action_ids = std::iter::once(Action::Stop).chain(global_ids.iter().map(|&n| Action::Move(n))).collect();
    Ok(FusedPrediction { action_ids, probs, lambda, sigma })
}

/// Scores the objects at the stop node against the instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectHead {
    pub instr_proj: DenseLayer,
    pub object_proj: DenseLayer,
    /// Input `[object ; q ⊙ object_proj(object) ; state token]`.
    pub scorer: FeedForwardNet,
}

impl ObjectHead {
    pub fn new<R: Rng + ?Sized>(object_dim: usize, instruction_dim: usize, hidden: usize, ffn_hidden: usize, rng: &mut R) -> Self {
        Self {
            instr_proj: DenseLayer::new(instruction_dim, hidden, rng),
            object_proj: DenseLayer::new(object_dim, hidden, rng),
            scorer: FeedForwardNet::new(object_dim + 2 * hidden, ffn_hidden, 1, rng),
        }
    }

    fn object_dim(&self) -> usize {
        self.object_proj.input_dim()
    }

    fn hidden_dim(&self) -> usize {
        self.object_proj.output_dim()
    }
}

impl Parameters for ObjectHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.instr_proj.visit(&format!("{prefix}.instr_proj"), f);
        self.object_proj.visit(&format!("{prefix}.object_proj"), f);
        self.scorer.visit(&format!("{prefix}.scorer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.instr_proj.visit_mut(&format!("{prefix}.instr_proj"), f);
        self.object_proj.visit_mut(&format!("{prefix}.object_proj"), f);
        self.scorer.visit_mut(&format!("{prefix}.scorer"), f);
    }
}

#[derive(Clone, Debug)]
pub struct ObjectCache {
    objects: Array2<f64>,
    instruction: Array2<f64>,
    query: Array2<f64>,
    projected: Array2<f64>,
    scorer_in: Array2<f64>,
    scorer: FfnCache,
    probs: Vec<f64>,
}

pub fn objects_forward(
    head: &ObjectHead,
    state_token: ArrayView1<f64>,
    objects: &[&[f64]],
    instruction: &[f64],
) -> Result<(Vec<f64>, ObjectCache)> {
    if objects.is_empty() {
        return Err(MbaError::State("no objects to ground at this node".into()));
    }
    let d_o = head.object_dim();
    if objects.iter().any(|o| o.len() != d_o) || state_token.len() != head.hidden_dim() {
        return Err(MbaError::Configuration("object head input has the wrong dimension".into()));
    }
    let m = objects.len();
    let objects = Array2::from_shape_vec((m, d_o), objects.concat()).expect("object rows");
    let instruction = Array2::from_shape_vec((1, instruction.len()), instruction.to_vec()).expect("row");
    let query = head.instr_proj.forward(instruction.view())?;
    let projected = head.object_proj.forward(objects.view())?;
    let interaction = &projected * &query.row(0);
    let state = state_token.broadcast((m, state_token.len())).expect("broadcast row");
    let scorer_in = concatenate(Axis(1), &[objects.view(), interaction.view(), state])
        .map_err(|e| MbaError::Configuration(e.to_string()))?;
    let (logits, scorer) = head.scorer.forward(scorer_in.view())?;
    let probs = softmax(logits.as_slice().expect("column"))?;
    Ok((probs.clone(), ObjectCache { objects, instruction, query, projected, scorer_in, scorer, probs }))
}

/// Returns `dL/d(state token)`.
pub fn objects_backward(head: &ObjectHead, cache: &ObjectCache, d_probs: &[f64], grad: &mut ObjectHead) -> Result<Array1<f64>> {
    let d_logits = softmax_backward(&cache.probs, d_probs);
    let d_logits = Array2::from_shape_vec((d_logits.len(), 1), d_logits).expect("column");
    let d_in = head.scorer.backward(cache.scorer_in.view(), &cache.scorer, d_logits.view(), &mut grad.scorer)?;
    let (d_o, h) = (head.object_dim(), head.hidden_dim());
    let d_inter = d_in.slice(s![.., d_o..d_o + h]);
    let d_projected = &d_inter * &cache.query.row(0);
    let d_query = (&d_inter * &cache.projected).sum_axis(Axis(0)).insert_axis(Axis(0));
    head.object_proj.backward(cache.objects.view(), d_projected.view(), &mut grad.object_proj)?;
    head.instr_proj.backward(cache.instruction.view(), d_query.view(), &mut grad.instr_proj)?;
    Ok(d_in.slice(s![.., d_o + h..]).sum_axis(Axis(0)))
}

/// Distribution over the objects at the current node.
pub fn predict_objects(head: &ObjectHead, state_token: ArrayView1<f64>, objects: &[&[f64]], instruction: &[f64]) -> Result<Vec<f64>> {
    Ok(objects_forward(head, state_token, objects, instruction)?.0)
}
