//! JSON form of a residual flow. Step sizes and witnesses are stored as hex
//! floats so a reloaded flow is bit-identical.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{ResidualBlock, ResidualFlow};
use crate::error::{Error, Result};
use crate::feature_maps::MapSpec;
use crate::hexfloat;

pub const FLOW_FORMAT: &str = "mmdflow.flow.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    #[serde(with = "hexfloat::serde_f64")]
    pub epsilon: f64,
    #[serde(with = "hexfloat::serde_vec")]
    pub psi: Vec<f64>,
    /// Index into [`FlowFile::maps`].
    pub map: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowFile {
    pub format: String,
    pub maps: Vec<MapSpec>,
    pub blocks: Vec<BlockEntry>,
}

impl FlowFile {
    pub fn from_flow(flow: &ResidualFlow) -> Self {
        Self {
            format: FLOW_FORMAT.to_string(),
            maps: vec![flow.map().spec().clone()],
            blocks: flow
                .blocks()
                .iter()
                .map(|b| BlockEntry {
                    epsilon: b.epsilon(),
                    psi: b.psi().iter().cloned().collect(),
                    map: 0,
                })
                .collect(),
        }
    }

    /// Rebuilds the flow, re-checking every block's certificate.
    pub fn into_flow(self) -> Result<ResidualFlow> {
        if self.format != FLOW_FORMAT {
            return Err(Error::Input(format!("unsupported flow format {:?}", self.format)));
        }
        if self.maps.len() != 1 {
            return Err(Error::Input("flow files must reference exactly one feature map".into()));
        }
        let map = Arc::new(self.maps[0].build()?);
        let mut flow = ResidualFlow::empty(map.clone());
        for entry in self.blocks {
            if entry.map != 0 {
                return Err(Error::Input(format!("block references unknown map {}", entry.map)));
            }
            let block = ResidualBlock::new_unchecked(map.clone(), entry.epsilon, DVector::from_vec(entry.psi))?;
            flow.push(block)?;
        }
        Ok(flow)
    }
}

impl ResidualFlow {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&FlowFile::from_flow(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<FlowFile>(s)?.into_flow()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
