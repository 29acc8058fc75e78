//! Navigation and grounding metrics: TL, NE, SR, SPL, RGS and RGSPL.

use std::fmt::Write as _;

use crate::error::{MbaError, Result};
use crate::world::{path_length, Episode, NodeId, WorldGraph};

pub const SUCCESS_RADIUS_M: f64 = 3.0;

/// Outcome of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub episode: Episode,
    pub trajectory: Vec<NodeId>,
    /// False when the step budget ran out.
    pub stopped: bool,
    pub predicted_object: Option<usize>,
    /// Decisions taken.
    pub steps: usize,
}

impl EpisodeResult {
    pub fn final_node(&self) -> NodeId {
        *self.trajectory.last().unwrap_or(&self.episode.start)
    }
}

/// Sum of traversed edge lengths.
pub fn trajectory_length(g: &WorldGraph, r: &EpisodeResult) -> Result<f64> {
    match r.trajectory.first() {
        Some(&s) if s == r.episode.start => path_length(g, &r.trajectory),
        _ => Err(MbaError::InvalidTrajectory(format!("trajectory of episode {} does not begin at its start", r.episode.episode_id))),
    }
}

/// Geodesic distance from the final node to the goal.
pub fn navigation_error(g: &WorldGraph, r: &EpisodeResult) -> Result<f64> {
    Ok(g.distances_from(r.episode.goal)?[r.final_node()])
}

pub fn is_success(g: &WorldGraph, final_node: NodeId, goal: NodeId) -> Result<bool> {
    Ok(g.distances_from(goal)?[final_node] <= SUCCESS_RADIUS_M)
}

pub fn success(g: &WorldGraph, r: &EpisodeResult) -> Result<f64> {
    Ok(if navigation_error(g, r)? <= SUCCESS_RADIUS_M { 1.0 } else { 0.0 })
}

/// `success · d_gt / max(tl, d_gt)`; equals `success` when `d_gt = 0`.
pub fn spl(success: f64, tl: f64, d_gt: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&success) || !(tl >= 0.0) || !(d_gt >= 0.0) {
        return Err(MbaError::Parameter(format!("spl({success}, {tl}, {d_gt}) needs non-negative inputs")));
    }
    if d_gt == 0.0 {
        return Ok(success);
    }
    Ok(success * d_gt / tl.max(d_gt))
}

/// 1 when the agent succeeded, stopped on its own and named the goal object.
pub fn rgs(g: &WorldGraph, r: &EpisodeResult) -> Result<f64> {
    let hit = success(g, r)? == 1.0 && r.stopped && r.predicted_object == Some(r.episode.goal_object);
    Ok(if hit { 1.0 } else { 0.0 })
}

pub fn rgspl(g: &WorldGraph, r: &EpisodeResult) -> Result<f64> {
    spl(rgs(g, r)?, trajectory_length(g, r)?, r.episode.gt_distance(g)?)
}

/// All metrics of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeMetrics {
    pub episode_id: u64,
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
    pub rgs: f64,
    pub rgspl: f64,
    pub stopped: bool,
    pub steps: usize,
}

pub fn evaluate(g: &WorldGraph, r: &EpisodeResult) -> Result<EpisodeMetrics> {
    let tl = trajectory_length(g, r)?;
    let d_gt = r.episode.gt_distance(g)?;
    let sr = success(g, r)?;
    let rgs = rgs(g, r)?;
    Ok(EpisodeMetrics {
        episode_id: r.episode.episode_id,
        tl,
        ne: navigation_error(g, r)?,
        sr,
        spl: spl(sr, tl, d_gt)?,
        rgs,
        rgspl: spl(rgs, tl, d_gt)?,
        stopped: r.stopped,
        steps: r.steps,
    })
}

/// Arithmetic means over a set of episodes; rates are fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub episodes: usize,
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
    pub rgs: f64,
    pub rgspl: f64,
}

pub fn aggregate(results: &[EpisodeMetrics]) -> Result<Summary> {
    if results.is_empty() {
        return Err(MbaError::Parameter("cannot summarize zero episodes".into()));
    }
    let n = results.len() as f64;
    let mean = |f: fn(&EpisodeMetrics) -> f64| results.iter().map(f).sum::<f64>() / n;
    Ok(Summary {
        episodes: results.len(),
        tl: mean(|m| m.tl),
        ne: mean(|m| m.ne),
        sr: mean(|m| m.sr),
        spl: mean(|m| m.spl),
        rgs: mean(|m| m.rgs),
        rgspl: mean(|m| m.rgspl),
    })
}

impl Summary {
    /// Lengths in meters, rates in percent, two decimals.
    pub fn report(&self) -> String {
        format!(
            "episodes {}  TL {:.2}  NE {:.2}  SR {:.2}  SPL {:.2}  RGS {:.2}  RGSPL {:.2}",
            self.episodes,
            self.tl,
            self.ne,
            self.sr * 100.0,
            self.spl * 100.0,
            self.rgs * 100.0,
            self.rgspl * 100.0
        )
    }

    pub fn csv(&self) -> String {
        format!(
            "episodes,TL,NE,SR,SPL,RGS,RGSPL\n{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.episodes, self.tl, self.ne, self.sr, self.spl, self.rgs, self.rgspl
        )
    }
}

pub const METRICS_HEADER: &str = "episode_id,TL,NE,SR,SPL,RGS,RGSPL,stopped,steps";

/// Per-episode CSV, one row per episode in the given order.
pub fn metrics_csv(results: &[EpisodeMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in results {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
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
