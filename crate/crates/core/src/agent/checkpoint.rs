//! Self-describing agent checkpoints: layer sizes, branch layout, the fitted
//! instruction center and every weight tensor.

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::{Agent, AgentConfig};
use crate::error::{MbaError, Result};
use crate::json;
use crate::neural::{load_checkpoint, to_checkpoint};

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    branches: String,
    feature_dim: usize,
    depth_dim: usize,
    instruction_dim: usize,
    object_dim: usize,
    hidden_dim: usize,
    ffn_hidden: usize,
    share_branch_params: bool,
    init_seed: u64,
    #[serde(with = "json::vec17")]
    instruction_center: Vec<f64>,
    tensors: Box<RawValue>,
}

impl Agent {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let c = self.config();
        let file = CheckpointFile {
            branches: c.branches.to_string(),
            feature_dim: c.feature_dim,
            depth_dim: c.depth_dim,
            instruction_dim: c.instruction_dim,
            object_dim: c.object_dim,
            hidden_dim: c.hidden_dim,
            ffn_hidden: c.ffn_hidden,
            share_branch_params: c.share_branch_params,
            init_seed: c.init_seed,
            instruction_center: self.instruction_center().to_vec(),
            tensors: RawValue::from_string(to_checkpoint(self)?)?,
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        Ok(text)
    }

    /// Rebuilds an agent from [`Agent::to_checkpoint_json`] output.
    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| MbaError::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        let branches = file.branches.parse().map_err(|e| MbaError::Checkpoint(format!("branch layout: {e}")))?;
        let config = AgentConfig {
            branches,
            feature_dim: file.feature_dim,
            depth_dim: file.depth_dim,
            instruction_dim: file.instruction_dim,
            object_dim: file.object_dim,
            hidden_dim: file.hidden_dim,
            ffn_hidden: file.ffn_hidden,
            share_branch_params: file.share_branch_params,
            init_seed: file.init_seed,
        };
        let mut agent = Agent::new(config).map_err(|e| MbaError::Checkpoint(e.to_string()))?;
        load_checkpoint(&mut agent, file.tensors.get())?;
        agent
            .set_instruction_center(file.instruction_center)
            .map_err(|e| MbaError::Checkpoint(e.to_string()))?;
        Ok(agent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(spec: &str) -> Agent {
        let cfg = AgentConfig { hidden_dim: 6, ffn_hidden: 5, init_seed: 9, ..AgentConfig::new(spec.parse().unwrap()) };
        Agent::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut agent = small("g:og,l:og,g:pv0.3,l:depth");
        agent.set_instruction_center((0..64).map(|i| (i as f64).sin() / 3.0).collect()).unwrap();
        let text = agent.to_checkpoint_json().unwrap();
        let back = Agent::from_checkpoint_json(&text).unwrap();
        assert_eq!(back, agent);
        assert_eq!(back.to_checkpoint_json().unwrap(), text);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let text = small("g:og,l:og").to_checkpoint_json().unwrap();
        let wrong_size = text.replacen("\"hidden_dim\": 6", "\"hidden_dim\": 7", 1);
        assert!(matches!(Agent::from_checkpoint_json(&wrong_size), Err(MbaError::Checkpoint(_))));
        assert!(matches!(Agent::from_checkpoint_json("{}"), Err(MbaError::Checkpoint(_))));
    }
}
