//! Agent checkpoints.
//!
//! A checkpoint is one JSON object:
//!
//! ```text
//! {"version":"also-checkpoint/1","network":{...},"parameters":[...],"step_count":n,
//!  "scores":[...],"buffer":[[x,r],...],"buffer_capacity":null,"pool_hash":"..."}
//! ```
//!
//! Floats are written in shortest round-trip form, so loading reproduces the
//! saved network bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::featurizer::FeatureVector;
use crate::surrogate::{NetworkConfig, ReplayBuffer, ValueNetwork};

pub const CHECKPOINT_VERSION: &str = "also-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub version: String,
    pub network: NetworkConfig,
    pub parameters: Vec<f64>,
    pub step_count: u64,
    pub scores: Vec<f64>,
    pub buffer: Vec<(Vec<f64>, f64)>,
    pub buffer_capacity: Option<usize>,
    pub pool_hash: String,
}

impl AgentCheckpoint {
    pub fn new(net: &ValueNetwork<f64>, buffer: &ReplayBuffer<f64>, scores: &[f64], pool_hash: &str) -> Self {
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            network: net.config().clone(),
            parameters: net.parameters().to_vec(),
            step_count: net.step_count(),
            scores: scores.to_vec(),
            buffer: buffer.samples().map(|(x, r)| (x.values().to_vec(), *r)).collect(),
            buffer_capacity: buffer.capacity(),
            pool_hash: pool_hash.to_string(),
        }
    }

    pub fn network(&self) -> Result<ValueNetwork<f64>, RunError> {
        Ok(ValueNetwork::from_parts(
            self.network.clone(),
            self.parameters.clone(),
            self.step_count,
        )?)
    }

    pub fn replay_buffer(&self) -> Result<ReplayBuffer<f64>, RunError> {
        let mut b = ReplayBuffer::new(self.buffer_capacity);
        for (x, r) in &self.buffer {
            b.push_sample(FeatureVector::new(x.clone())?, *r)?;
        }
        Ok(b)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| RunError::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        match value.get("version").and_then(|v| v.as_str()) {
            Some(CHECKPOINT_VERSION) => {}
            Some(other) => {
                return Err(RunError::Checkpoint(format!(
                    "version `{other}` is not supported (expected `{CHECKPOINT_VERSION}`)"
                )))
            }
            None => return Err(RunError::Checkpoint("missing version tag".into())),
        }
        let cp: Self =
            serde_json::from_value(value).map_err(|e| RunError::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        cp.network()?;
        Ok(cp)
    }
}

pub fn save_checkpoint(cp: &AgentCheckpoint, path: impl AsRef<Path>) -> Result<(), RunError> {
    std::fs::write(path, cp.to_json())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AgentCheckpoint, RunError> {
    AgentCheckpoint::from_json(&std::fs::read_to_string(path)?)
}
