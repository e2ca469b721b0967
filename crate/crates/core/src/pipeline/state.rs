use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::stages::{DensifyEvent, MotionTrace};
use crate::deform::{DeformNet, DeformTrace};
use crate::gaussian::GaussianCloud;
use crate::motion::MotionParams;

/// Log of one executed stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Part being modeled; 0 for the static stage.
    pub part_id: u32,
    pub wall_seconds: f64,
    pub loss: Vec<f64>,
    /// For the joint stages, which state (0 or 1) each step rendered.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub state: Vec<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub densify: Vec<DensifyEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<MotionTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deform: Option<DeformTrace>,
}

impl StageRecord {
    pub fn new(stage: &str, part_id: u32) -> Self {
        Self {
            stage: stage.to_string(),
            part_id,
            ..Default::default()
        }
    }

    /// Mean loss of state `s` over the last `fraction` of steps.
    pub fn tail_state_mean(&self, s: u8, fraction: f64) -> Option<f64> {
        let from = ((1.0 - fraction) * self.loss.len() as f64) as usize;
        let vals: Vec<f64> = (from..self.loss.len())
            .filter(|&i| self.state.get(i) == Some(&s))
            .map(|i| self.loss[i])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Cloud and joint as they stood at a stage boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSnapshot {
    pub stage: String,
    pub part_id: u32,
    /// Dataset state whose pose the cloud is in.
    pub frame_state: usize,
    pub cloud: GaussianCloud,
    pub motion: Option<MotionParams>,
}

/// Everything a run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    /// Final cloud, posed in state 0.
    pub cloud: GaussianCloud,
    pub motions: BTreeMap<u32, MotionParams>,
    pub log: Vec<StageRecord>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub nets: BTreeMap<u32, DeformNet>,
    #[serde(skip)]
    pub snapshots: Vec<StageSnapshot>,
    /// Vanilla runs: a part that ended with no Gaussians, or with all of them.
    #[serde(default)]
    pub mask_collapse: bool,
}

impl PipelineState {
    pub fn new(cloud: GaussianCloud, seed: u64) -> Self {
        Self {
            cloud,
            motions: BTreeMap::new(),
            log: Vec::new(),
            seed,
            nets: BTreeMap::new(),
            snapshots: Vec::new(),
            mask_collapse: false,
        }
    }

    pub fn record(&self, stage: &str, part_id: u32) -> Option<&StageRecord> {
        self.log.iter().find(|r| r.stage == stage && r.part_id == part_id)
    }

    pub fn snapshot(&self, stage: &str, part_id: u32) -> Option<&StageSnapshot> {
        self.snapshots.iter().find(|s| s.stage == stage && s.part_id == part_id)
    }
}
