//! Synthetic panoramic view features under the four visual input strategies:
//! original views, depth, perturbed (mixed with incongruent views) and
//! random noise.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{MbaError, Result};
use crate::seed;
use crate::world::{euclidean, NodeId, WorldGraph};

/// Weights of the target appearance, the host node's own appearance and the
/// direction-dependent positional pattern in a view.
const TARGET_WEIGHT: f64 = 0.6;
const HOST_WEIGHT: f64 = 0.2;
const POSITIONAL_WEIGHT: f64 = 0.2;

pub const DEPTH_LEVELS: usize = 16;
pub const DEPTH_RANGE_M: f64 = 10.0;
/// Depth reported for views with no navigable neighbor.
pub const DEPTH_SENTINEL: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PanoramaFeatures {
    pub node: NodeId,
    pub views: Vec<Vec<f64>>,
    /// `(sin θ, cos θ, sin φ, cos φ)` per view.
    pub directions: Vec<[f64; 4]>,
    pub view_to_neighbor: BTreeMap<usize, NodeId>,
}

impl PanoramaFeatures {
    pub fn dim(&self) -> usize {
        self.views.first().map_or(0, Vec::len)
    }

    pub fn mean_view(&self) -> Vec<f64> {
        mean_of(&self.views)
    }

    pub fn view_toward(&self, neighbor: NodeId) -> Option<usize> {
        self.view_to_neighbor.iter().find(|&(_, &n)| n == neighbor).map(|(&v, _)| v)
    }
}

pub(crate) fn mean_of(vectors: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = vectors.first() else { return Vec::new() };
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Heading and elevation of every view slot. Thirty-six views use three
/// elevation rings (-30°, 0°, +30°) of twelve headings; any other count is a
/// single horizontal ring.
pub fn view_angles(k_views: usize) -> Vec<(f64, f64)> {
    if k_views == 36 {
        let mut out = Vec::with_capacity(36);
        for ring in 0..3 {
            let elevation = (ring as f64 - 1.0) * PI / 6.0;
            for h in 0..12 {
                out.push((TAU * h as f64 / 12.0, elevation));
            }
        }
        out
    } else {
        (0..k_views).map(|h| (TAU * h as f64 / k_views as f64, 0.0)).collect()
    }
}

pub fn direction_encoding(heading: f64, elevation: f64) -> [f64; 4] {
    [heading.sin(), heading.cos(), elevation.sin(), elevation.cos()]
}

/// Heading and elevation of the vector from `from` to `to`.
pub fn relative_angles(from: &[f64; 3], to: &[f64; 3]) -> (f64, f64) {
    let (dx, dy, dz) = (to[0] - from[0], to[1] - from[1], to[2] - from[2]);
    (dy.atan2(dx), dz.atan2((dx * dx + dy * dy).sqrt()))
}

fn unit(heading: f64, elevation: f64) -> [f64; 3] {
    [elevation.cos() * heading.cos(), elevation.cos() * heading.sin(), elevation.sin()]
}

/// Assigns every neighbor of `n` its own view slot: globally, the pair with
/// the smallest angular gap is matched first (ties by neighbor id then slot).
pub fn neighbor_slots(g: &WorldGraph, n: NodeId) -> Result<BTreeMap<usize, NodeId>> {
    let here = g.position(n)?;
    let angles = view_angles(g.k_views());
    let slot_units: Vec<[f64; 3]> = angles.iter().map(|&(h, e)| unit(h, e)).collect();
    let mut scored = Vec::new();
    for &(m, _) in g.neighbors(n)? {
        let (h, e) = relative_angles(&here, &g.position(m)?);
        let d = unit(h, e);
        for (slot, u) in slot_units.iter().enumerate() {
            let cos = (d[0] * u[0] + d[1] * u[1] + d[2] * u[2]).clamp(-1.0, 1.0);
            scored.push((cos.acos(), m, slot));
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut slots = BTreeMap::new();
    let mut taken_neighbors = std::collections::BTreeSet::new();
    for (_, m, slot) in scored {
        if !slots.contains_key(&slot) && !taken_neighbors.contains(&m) {
            slots.insert(slot, m);
            taken_neighbors.insert(m);
        }
    }
    if taken_neighbors.len() != g.neighbors(n)?.len() {
        return Err(MbaError::Consistency(format!("node {n} has more neighbors than view slots")));
    }
    Ok(slots)
}

fn positional_pattern(dim: usize, heading: f64, elevation: f64) -> impl Iterator<Item = f64> {
    (0..dim).map(move |j| 0.5 + 0.5 * (((j % 5) + 1) as f64 * heading + 0.7 * j as f64 + 2.0 * elevation).sin())
}

fn build_view(
    g: &WorldGraph,
    n: NodeId,
    slot: usize,
    angles: (f64, f64),
    neighbor: Option<NodeId>,
    seed: u64,
) -> Result<Vec<f64>> {
    let host = &g.node(n)?.appearance;
    let dim = host.len();
    let target: Vec<f64> = match neighbor {
        Some(m) => g.node(m)?.appearance.clone(),
        None => {
            let mut rng = seed::rng(seed, "background", &[n as u64, slot as u64]);
            (0..dim).map(|_| rng.random::<f64>()).collect()
        }
    };
    Ok(target
        .iter()
        .zip(host)
        .zip(positional_pattern(dim, angles.0, angles.1))
        .map(|((t, h), p)| TARGET_WEIGHT * t + HOST_WEIGHT * h + POSITIONAL_WEIGHT * p)
        .collect())
}

/// Original panorama at `n`: the slot facing each neighbor shows that
/// neighbor's appearance; the rest show seeded background.
pub fn original_features(g: &WorldGraph, n: NodeId, seed: u64) -> Result<PanoramaFeatures> {
    let slots = neighbor_slots(g, n)?;
    let angles = view_angles(g.k_views());
    let views = angles
        .iter()
        .enumerate()
        .map(|(slot, &a)| build_view(g, n, slot, a, slots.get(&slot).copied(), seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(PanoramaFeatures {
        node: n,
        views,
        directions: angles.iter().map(|&(h, e)| direction_encoding(h, e)).collect(),
        view_to_neighbor: slots,
    })
}

/// A single original view, without building the whole panorama.
pub fn original_view(g: &WorldGraph, n: NodeId, slot: usize, seed: u64) -> Result<Vec<f64>> {
    let angles = view_angles(g.k_views());
    let a = *angles
        .get(slot)
        .ok_or_else(|| MbaError::Parameter(format!("view index {slot} out of range")))?;
    let slots = neighbor_slots(g, n)?;
    build_view(g, n, slot, a, slots.get(&slot).copied(), seed)
}

pub fn quantize_depth(distance: f64) -> f64 {
    let x = (distance / DEPTH_RANGE_M).clamp(0.0, 1.0);
    let level = ((x * DEPTH_LEVELS as f64).floor() as usize).min(DEPTH_LEVELS - 1);
    level as f64 / DEPTH_LEVELS as f64
}

/// Depth analog: per view, the quantized distance to the neighbor it faces
/// (sentinel 1.0 for background) and the view direction, tiled to `depth_dim`.
pub fn depth_features(g: &WorldGraph, n: NodeId, depth_dim: usize) -> Result<PanoramaFeatures> {
    let feature_dim = g.feature_dim();
    if depth_dim == 0 || depth_dim >= feature_dim {
        return Err(MbaError::Configuration(format!(
            "depth dim {depth_dim} must be positive and below the feature dim {feature_dim}"
        )));
    }
    let slots = neighbor_slots(g, n)?;
    let here = g.position(n)?;
    let angles = view_angles(g.k_views());
    let mut views = Vec::with_capacity(angles.len());
    for (slot, &(h, e)) in angles.iter().enumerate() {
        let depth = match slots.get(&slot) {
            Some(&m) => quantize_depth(euclidean(&here, &g.position(m)?)),
            None => DEPTH_SENTINEL,
        };
        let dir = direction_encoding(h, e);
        let base = [depth, dir[0], dir[1], dir[2], dir[3]];
        views.push((0..depth_dim).map(|j| base[j % base.len()]).collect());
    }
    Ok(PanoramaFeatures {
        node: n,
        views,
        directions: angles.iter().map(|&(h, e)| direction_encoding(h, e)).collect(),
        view_to_neighbor: slots,
    })
}

/// `(1 - γ) · v_og + γ · v_iv`, elementwise.
pub fn perturbed_view(v_og: &[f64], v_iv: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(MbaError::Parameter(format!("gamma {gamma} outside [0, 1]")));
    }
    if v_og.len() != v_iv.len() {
        return Err(MbaError::Configuration(format!("view dims differ: {} vs {}", v_og.len(), v_iv.len())));
    }
    Ok(v_og.iter().zip(v_iv).map(|(a, b)| (1.0 - gamma) * a + gamma * b).collect())
}

/// Which (node, view) an incongruent view for `(n, view_idx)` is drawn from:
/// uniform over the views of every other node in the world.
pub fn incongruent_source(g: &WorldGraph, n: NodeId, view_idx: usize, seed: u64) -> Result<(NodeId, usize)> {
    g.node(n)?;
    if g.len() < 2 {
        return Err(MbaError::Sampling("incongruent views need at least two nodes".into()));
    }
    let mut rng = seed::rng(seed, "incongruent", &[n as u64, view_idx as u64]);
    let r = rng.random_range(0..g.len() - 1);
    let source = if r >= n { r + 1 } else { r };
    Ok((source, rng.random_range(0..g.k_views())))
}

pub fn sample_incongruent(g: &WorldGraph, n: NodeId, view_idx: usize, seed: u64) -> Result<Vec<f64>> {
    let (source, slot) = incongruent_source(g, n, view_idx, seed)?;
    original_view(g, source, slot, g.seed())
}

/// `dim` i.i.d. uniform "pixel" values in `[0, 1)`.
pub fn random_noise<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.random::<f64>()).collect()
}

/// Visual input strategy for one branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PerturbationSpec {
    Original,
    Depth,
    /// Perturbed view; `None` takes γ from the training configuration.
    Perturbed(Option<f64>),
    RandomNoise,
}

impl PerturbationSpec {
    pub fn with_default_gamma(self, gamma: f64) -> Self {
        match self {
            PerturbationSpec::Perturbed(None) => PerturbationSpec::Perturbed(Some(gamma)),
            other => other,
        }
    }

    /// Compact label without the colon, as used inside branch configs.
    pub fn compact(&self) -> String {
        match self {
            PerturbationSpec::Perturbed(Some(g)) => format!("pv{g}"),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbationSpec::Original => write!(f, "og"),
            PerturbationSpec::Depth => write!(f, "depth"),
            PerturbationSpec::Perturbed(Some(g)) => write!(f, "pv:{g}"),
            PerturbationSpec::Perturbed(None) => write!(f, "pv"),
            PerturbationSpec::RandomNoise => write!(f, "rn"),
        }
    }
}

/// Parses `og`, `depth` (or `d`), `rn`, `pv`, `pv:<γ>` or `pv<γ>`. `none` and
/// `-` are handled by the caller as an omitted slot.
impl FromStr for PerturbationSpec {
    type Err = MbaError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "og" => return Ok(PerturbationSpec::Original),
            "depth" | "d" => return Ok(PerturbationSpec::Depth),
            "rn" => return Ok(PerturbationSpec::RandomNoise),
            "pv" => return Ok(PerturbationSpec::Perturbed(None)),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("pv") {
            let rest = rest.strip_prefix(':').unwrap_or(rest);
            let gamma: f64 = rest.parse().map_err(|_| MbaError::Parameter(format!("bad gamma in `{s}`")))?;
            if !(0.0..=1.0).contains(&gamma) {
                return Err(MbaError::Parameter(format!("gamma {gamma} outside [0, 1]")));
            }
            return Ok(PerturbationSpec::Perturbed(Some(gamma)));
        }
        Err(MbaError::Parameter(format!("unknown perturbation `{s}`")))
    }
}
