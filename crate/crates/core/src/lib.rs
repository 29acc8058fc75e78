//! Multi-branch vision-language navigation on synthetic graph worlds.
//!
//! The crate is organised bottom-up:
//!
//! - [`world`]: procedurally generated navigation graphs, episodes and the
//!   shortest-path oracle;
//! - [`features`]: panoramic view features under the visual input
//!   strategies (original, depth, perturbed, random noise);
//! - [`neural`]: dense layers, feed-forward nets and exact gradients;
//! - [`topomap`]: the incrementally built topological map;
//! - [`agent`]: local/global branches, branch weighting and dynamic fusion;
//! - [`training`]: cross-entropy training with teacher forcing and DAgger;
//! - [`metrics`]: TL, NE, SR, SPL, RGS and RGSPL.

pub mod agent;
pub mod error;
pub mod features;
pub mod json;
pub mod metrics;
pub mod neural;
pub mod seed;
pub mod topomap;
pub mod training;
pub mod world;

pub use error::{MbaError, Result};
