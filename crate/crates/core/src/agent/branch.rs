//! Single-branch encoders.
//!
//! A branch turns a set of rows (row 0 the stop/state token, then one row per
//! action node) into hidden vectors `ℬ`:
//!
//! ```text
//! x  ── [depth projection] ──┬─────────────────────────────┐
//!                            └─ visual_proj ─ ⊙ q ─┐        │
//! instruction ─ instr_proj ─ q ────────────────────┘        │
//!            encoder FFN([x ; cues ; q ⊙ visual_proj(x)]) ─> ℬ ─ scorer FFN ─> logits
//! ```
//!
//! Local and global branches share this structure and differ only in how the
//! rows are assembled.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::grounding::GroundingTarget;
use crate::error::{MbaError, Result};
use crate::features::{direction_encoding, relative_angles, PanoramaFeatures};
use crate::neural::{softmax, softmax_backward, DenseLayer, FeedForwardNet, FfnCache, Parameters};
use crate::topomap::TopoMap;
use crate::world::{euclidean, NodeId, WorldGraph};

/// `(sin θ, cos θ, sin φ, cos φ, distance / 10 m, is_visited, is_stop,
/// instruction match)`
pub const CUE_DIM: usize = 8;
const DISTANCE_SCALE_M: f64 = 10.0;
/// View features live in `[0, 1]`; the encoder sees them centered.
const FEATURE_CENTER: f64 = 0.5;

/// Rows fed to a branch. `rows` may hold raw depth vectors, in which case
/// the branch applies its depth projection first.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchInput {
    pub rows: Array2<f64>,
    pub cues: Array2<f64>,
    /// Node of every non-stop row.
    pub action_ids: Vec<NodeId>,
}

impl BranchInput {
    fn from_rows(rows: Vec<Vec<f64>>, cues: Vec<[f64; CUE_DIM]>, action_ids: Vec<NodeId>) -> Self {
        let dim = rows[0].len();
        let n = rows.len();
        Self {
            rows: Array2::from_shape_vec((n, dim), rows.concat()).expect("rows share a dimension"),
            cues: Array2::from_shape_vec((n, CUE_DIM), cues.concat()).expect("fixed cue width"),
            action_ids,
        }
    }
}

fn stop_cues(grounding: f64) -> [f64; CUE_DIM] {
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, grounding]
}

fn match_of(target: Option<&GroundingTarget>, row: &[f64]) -> f64 {
    target.map_or(0.0, |t| t.view_match(row))
}

/// Rows of a local branch: the pooled panorama, then the view facing each
/// adjacent node in ascending id order. Without a grounding target the
/// instruction-match cue is 0.
pub fn local_input(
    pano: &PanoramaFeatures,
    g: &WorldGraph,
    is_visited: impl Fn(NodeId) -> bool,
    target: Option<&GroundingTarget>,
) -> Result<BranchInput> {
    let here = g.position(pano.node)?;
    let pooled = pano.mean_view();
    let mut cues = vec![stop_cues(match_of(target, &pooled))];
    let mut rows = vec![pooled];
    let mut ids = Vec::new();
    for candidate in g.candidates(pano.node)? {
        let view = pano
            .view_toward(candidate)
            .ok_or_else(|| MbaError::Consistency(format!("no view faces neighbor {candidate}")))?;
        let d = pano.directions[view];
        let dist = euclidean(&here, &g.position(candidate)?) / DISTANCE_SCALE_M;
        let visited = f64::from(u8::from(is_visited(candidate)));
        cues.push([d[0], d[1], d[2], d[3], dist, visited, 0.0, match_of(target, &pano.views[view])]);
        rows.push(pano.views[view].clone());
        ids.push(candidate);
    }
    Ok(BranchInput::from_rows(rows, cues, ids))
}

/// Rows of a global branch: the current node's pooled panorama, then every
/// map action node (ghosts and backtrack targets) with its pooled embedding
/// and its position relative to the current node.
pub fn global_input(map: &TopoMap, g: &WorldGraph, target: Option<&GroundingTarget>) -> Result<BranchInput> {
    let current = map.current().ok_or_else(|| MbaError::State("global branch on an empty map".into()))?;
    let here = g.position(current)?;
    let pooled = map.visited_embedding(current)?;
    let mut cues = vec![stop_cues(match_of(target, &pooled))];
    let mut rows = vec![pooled];
    let ids = map.action_nodes();
    for &n in &ids {
        let there = g.position(n)?;
        let (heading, elevation) = relative_angles(&here, &there);
        let d = direction_encoding(heading, elevation);
        let dist = euclidean(&here, &there) / DISTANCE_SCALE_M;
        let embedding = map.embedding(n)?;
        let visited = f64::from(u8::from(map.is_visited(n)));
        cues.push([d[0], d[1], d[2], d[3], dist, visited, 0.0, match_of(target, &embedding)]);
        rows.push(embedding);
    }
    Ok(BranchInput::from_rows(rows, cues, ids))
}

/// Weights of one branch stack.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub instr_proj: DenseLayer,
    pub visual_proj: DenseLayer,
    pub encoder: FeedForwardNet,
    pub scorer: FeedForwardNet,
}

impl BranchParams {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, instruction_dim: usize, hidden: usize, ffn_hidden: usize, rng: &mut R) -> Self {
        Self {
            instr_proj: DenseLayer::new(instruction_dim, hidden, rng),
            visual_proj: DenseLayer::new(feature_dim, hidden, rng),
            encoder: FeedForwardNet::new(feature_dim + CUE_DIM + hidden, ffn_hidden, hidden, rng),
            scorer: FeedForwardNet::new(hidden, ffn_hidden, 1, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.visual_proj.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.instr_proj.output_dim()
    }
}

impl Parameters for BranchParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.instr_proj.visit(&format!("{prefix}.instr_proj"), f);
        self.visual_proj.visit(&format!("{prefix}.visual_proj"), f);
        self.encoder.visit(&format!("{prefix}.encoder"), f);
        self.scorer.visit(&format!("{prefix}.scorer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.instr_proj.visit_mut(&format!("{prefix}.instr_proj"), f);
        self.visual_proj.visit_mut(&format!("{prefix}.visual_proj"), f);
        self.encoder.visit_mut(&format!("{prefix}.encoder"), f);
        self.scorer.visit_mut(&format!("{prefix}.scorer"), f);
    }
}

/// Hidden states of one branch. Row 0 is the stop/state token.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    pub hidden: Array2<f64>,
    pub action_ids: Vec<NodeId>,
}

impl BranchOutput {
    pub fn state_token(&self) -> Array1<f64> {
        self.hidden.row(0).to_owned()
    }
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    raw: Array2<f64>,
    projected: Option<Array2<f64>>,
    instruction: Array2<f64>,
    query: Array2<f64>,
    visual: Array2<f64>,
    encoder_in: Array2<f64>,
    encoder: FfnCache,
}

fn row(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("row vector")
}

/// Runs the branch encoder over `input`.
pub fn encode(
    params: &BranchParams,
    depth_proj: Option<&DenseLayer>,
    instruction: &[f64],
    input: &BranchInput,
) -> Result<(BranchOutput, EncodeCache)> {
    let raw = &input.rows - FEATURE_CENTER;
    let projected = match depth_proj {
        Some(p) => Some(p.forward(raw.view())?),
        None => None,
    };
    let x = projected.as_ref().unwrap_or(&raw);
    if x.ncols() != params.feature_dim() {
        return Err(MbaError::Configuration(format!(
            "branch expects {}-dim views, got {}",
            params.feature_dim(),
            x.ncols()
        )));
    }
    let query = params.instr_proj.forward(row(instruction))?;
    let visual = params.visual_proj.forward(x.view())?;
    let interaction = &visual * &query.row(0);
    let encoder_in = concatenate(Axis(1), &[x.view(), input.cues.view(), interaction.view()])
        .map_err(|e| MbaError::Configuration(e.to_string()))?;
    let (hidden, encoder) = params.encoder.forward(encoder_in.view())?;
    Ok((
        BranchOutput { hidden, action_ids: input.action_ids.clone() },
        EncodeCache {
            raw,
            projected,
            instruction: row(instruction).to_owned(),
            query,
            visual,
            encoder_in,
            encoder,
        },
    ))
}

/// Backpropagates `d_hidden` through the encoder into `grad` (and the depth
/// projection gradient, when the branch has one).
pub fn encode_backward(
    params: &BranchParams,
    depth_proj: Option<&DenseLayer>,
    cache: &EncodeCache,
    d_hidden: ArrayView2<f64>,
    grad: &mut BranchParams,
    depth_grad: Option<&mut DenseLayer>,
) -> Result<()> {
    let d_in = params.encoder.backward(cache.encoder_in.view(), &cache.encoder, d_hidden, &mut grad.encoder)?;
    let f = params.feature_dim();
    let d_inter = d_in.slice(s![.., f + CUE_DIM..]);
    let d_visual = &d_inter * &cache.query.row(0);
    let d_query = (&d_inter * &cache.visual).sum_axis(Axis(0)).insert_axis(Axis(0));
    let x = cache.projected.as_ref().unwrap_or(&cache.raw);
    let mut d_x = params.visual_proj.backward(x.view(), d_visual.view(), &mut grad.visual_proj)?;
    d_x += &d_in.slice(s![.., ..f]);
    params.instr_proj.backward(cache.instruction.view(), d_query.view(), &mut grad.instr_proj)?;
    if let (Some(p), Some(g)) = (depth_proj, depth_grad) {
        p.backward(cache.raw.view(), d_x.view(), g)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ScoreCache {
    logits: Array2<f64>,
    scorer: FfnCache,
}

/// Per-row navigation logits and the branch's own softmax over
/// `{stop} ∪ actions`.
pub fn score(params: &BranchParams, out: &BranchOutput) -> Result<(Vec<f64>, ScoreCache)> {
    let (logits, scorer) = params.scorer.forward(out.hidden.view())?;
    let probs = softmax(logits.as_slice().expect("column of logits"))?;
    Ok((probs, ScoreCache { logits, scorer }))
}

/// Returns `dL/dℬ` given `dL/dP` for the branch distribution.
pub fn score_backward(
    params: &BranchParams,
    out: &BranchOutput,
    probs: &[f64],
    cache: &ScoreCache,
    d_probs: &[f64],
    grad: &mut BranchParams,
) -> Result<Array2<f64>> {
    let d_logits = softmax_backward(probs, d_probs);
    let d_logits = Array2::from_shape_vec((d_logits.len(), 1), d_logits).expect("column");
    debug_assert_eq!(d_logits.nrows(), cache.logits.nrows());
    params.scorer.backward(out.hidden.view(), &cache.scorer, d_logits.view(), &mut grad.scorer)
}

/// Local branch hidden states for a panorama.
pub fn local_branch(
    instruction: &[f64],
    pano: &PanoramaFeatures,
    g: &WorldGraph,
    params: &BranchParams,
    depth_proj: Option<&DenseLayer>,
) -> Result<BranchOutput> {
    let input = local_input(pano, g, |_| false, None)?;
    Ok(encode(params, depth_proj, instruction, &input)?.0)
}

/// Global branch hidden states for a topological map.
pub fn global_branch(
    instruction: &[f64],
    map: &TopoMap,
    g: &WorldGraph,
    params: &BranchParams,
    depth_proj: Option<&DenseLayer>,
) -> Result<BranchOutput> {
    let input = global_input(map, g, None)?;
    Ok(encode(params, depth_proj, instruction, &input)?.0)
}

/// Branch distribution over `{stop} ∪ actions`.
pub fn branch_scores(out: &BranchOutput, params: &BranchParams) -> Result<Vec<f64>> {
    Ok(score(params, out)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::original_features;
    use crate::world::{generate_world, WorldParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (WorldGraph, BranchParams, Vec<f64>) {
        let g = generate_world(8, &WorldParams { nodes: 25, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = BranchParams::new(64, 64, 16, 32, &mut rng);
        let instr = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        (g, params, instr)
    }

    #[test]
    fn local_branch_shape_and_determinism() {
        let (g, params, instr) = setup();
        for n in 0..g.len() {
            let pano = original_features(&g, n, 0).unwrap();
            let out = local_branch(&instr, &pano, &g, &params, None).unwrap();
            let d = g.candidates(n).unwrap().len();
            assert_eq!(out.hidden.nrows(), d + 1);
            assert_eq!(out.action_ids, g.candidates(n).unwrap());
            assert_eq!(out, local_branch(&instr, &pano, &g, &params, None).unwrap());
        }
    }

    #[test]
    fn rows_are_encoded_independently() {
        let (g, params, instr) = setup();
        let n = (0..g.len()).max_by_key(|&n| g.candidates(n).unwrap().len()).unwrap();
        let pano = original_features(&g, n, 0).unwrap();
        let input = local_input(&pano, &g, |_| false, None).unwrap();
        let rows = input.rows.nrows();
        // reverse the candidate rows, keep stop first
        let perm: Vec<usize> = std::iter::once(0).chain((1..rows).rev()).collect();
        let permuted = BranchInput {
            rows: input.rows.select(Axis(0), &perm),
            cues: input.cues.select(Axis(0), &perm),
            action_ids: perm[1..].iter().map(|&i| input.action_ids[i - 1]).collect(),
        };
        let a = encode(&params, None, &instr, &input).unwrap().0;
        let b = encode(&params, None, &instr, &permuted).unwrap().0;
        assert_eq!(b.hidden, a.hidden.select(Axis(0), &perm));
        let pa = branch_scores(&a, &params).unwrap();
        let pb = branch_scores(&b, &params).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            assert!((pb[i] - pa[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_hidden_rows_score_uniformly() {
        let (_, params, _) = setup();
        let out = BranchOutput { hidden: Array2::from_elem((5, 16), 0.3), action_ids: vec![1, 2, 3, 4] };
        let p = branch_scores(&out, &params).unwrap();
        for v in &p {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_view_dim_is_a_configuration_error() {
        let (g, params, instr) = setup();
        let pano = crate::features::depth_features(&g, 0, 16).unwrap();
        assert!(matches!(local_branch(&instr, &pano, &g, &params, None), Err(MbaError::Configuration(_))));
    }

    #[test]
    fn global_branch_on_empty_map_is_a_state_error() {
        let (g, params, instr) = setup();
        assert!(matches!(global_branch(&instr, &TopoMap::new(), &g, &params, None), Err(MbaError::State(_))));
    }
}
