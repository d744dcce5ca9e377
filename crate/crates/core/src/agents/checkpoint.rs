//! Trained parameters on disk.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::NetworkSizes;
use super::train::Agent;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub node_id: String,
    pub params: ParamStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub sizes: NetworkSizes,
    pub agents: Vec<AgentParams>,
}

impl Checkpoint {
    pub fn capture(agents: &[Agent], sizes: &NetworkSizes, config_hash: &str) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            sizes: sizes.clone(),
            agents: agents
                .iter()
                .map(|a| AgentParams {
                    node_id: a.spec.id.clone(),
                    params: a.store.clone(),
                })
                .collect(),
        }
    }

    /// Copy stored parameters into freshly built agents of the same shape.
    pub fn restore(&self, agents: &mut [Agent]) -> Result<()> {
        if self.agents.len() != agents.len() {
            return Err(Error::Dimension(format!(
                "checkpoint holds {} agents, network has {}",
                self.agents.len(),
                agents.len()
            )));
        }
        for (saved, agent) in self.agents.iter().zip(agents.iter_mut()) {
            if saved.node_id != agent.spec.id {
                return Err(Error::UnknownNode(saved.node_id.clone()));
            }
            let shapes = |s: &ParamStore| s.params().iter().map(|p| (p.name.clone(), p.rows, p.cols)).collect::<Vec<_>>();
            if shapes(&saved.params) != shapes(&agent.store) {
                return Err(Error::Dimension(format!("parameter layout of {} differs from the checkpoint", saved.node_id)));
            }
            agent.store = saved.params.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                reason: format!("checkpoint version {} is not {CHECKPOINT_VERSION}", ck.version),
            });
        }
        Ok(ck)
    }
}
