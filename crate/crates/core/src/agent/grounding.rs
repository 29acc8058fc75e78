//! Fixed cross-modal alignment between instructions and observations.
//!
//! Instructions are written in a language shared by every world: a fixed
//! projection of a visual descriptor and an object feature. The agent knows
//! that projection the way a pretrained vision-language encoder knows its
//! joint embedding space, and uses it for one untrained cue per row: the
//! cosine between the projected observation and the instruction.

use ndarray::{s, Array1, Array2};

use crate::error::{MbaError, Result};
use crate::world::instruction_projection;

/// Features are centered on this value before projection.
const CENTER: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Grounding {
    visual: Array2<f64>,
    object: Array2<f64>,
    /// Projection of an all-`CENTER` descriptor.
    offset: Array1<f64>,
}

impl Grounding {
    pub fn new(instruction_dim: usize, feature_dim: usize, object_dim: usize) -> Self {
        let rows = instruction_projection(instruction_dim, feature_dim + object_dim);
        let full = Array2::from_shape_vec((instruction_dim, feature_dim + object_dim), rows.concat()).expect("projection shape");
        let offset = full.sum_axis(ndarray::Axis(1)) * CENTER;
        Self {
            visual: full.slice(s![.., ..feature_dim]).to_owned(),
            object: full.slice(s![.., feature_dim..]).to_owned(),
            offset,
        }
    }

    pub fn instruction_dim(&self) -> usize {
        self.offset.len()
    }

    /// The instruction relative to a neutral descriptor.
    pub fn target(&self, instruction: &[f64]) -> Result<GroundingTarget<'_>> {
        if instruction.len() != self.instruction_dim() {
            return Err(MbaError::Configuration(format!(
                "instruction of dim {} for a {}-dim grounding",
                instruction.len(),
                self.instruction_dim()
            )));
        }
        let z = Array1::from_vec(instruction.to_vec()) - &self.offset;
        Ok(GroundingTarget { grounding: self, z })
    }
}

pub struct GroundingTarget<'a> {
    grounding: &'a Grounding,
    z: Array1<f64>,
}

impl GroundingTarget<'_> {
    /// Agreement of a view-space vector with the instruction, in `[-1, 1]`;
    /// 0 for vectors of any other dimension.
    pub fn view_match(&self, view: &[f64]) -> f64 {
        self.matches(&self.grounding.visual, view)
    }

    pub fn object_match(&self, feature: &[f64]) -> f64 {
        self.matches(&self.grounding.object, feature)
    }

    fn matches(&self, projection: &Array2<f64>, v: &[f64]) -> f64 {
        if v.len() != projection.ncols() {
            return 0.0;
        }
        let centered: Array1<f64> = v.iter().map(|x| x - CENTER).collect();
        cosine(&projection.dot(&centered), &self.z)
    }
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let norm = a.dot(a).sqrt() * b.dot(b).sqrt();
    if norm > 0.0 {
        a.dot(b) / norm
    } else {
        0.0
    }
}
