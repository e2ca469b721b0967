//! Run manifests: configuration, seeds, traces, reports and artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deform::DeformNet;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::motion::{MotionParams, MotionType};
use crate::pipeline::{run, PipelineConfig, PipelineState, RunMode, StageRecord};
use crate::view::View;

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub mode: RunMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known_type: Option<MotionType>,
    pub dataset: String,
    pub config: PipelineConfig,
    pub config_hash: String,
    pub seed: u64,
    /// False for checkpoints written at intermediate stage boundaries.
    pub complete: bool,
    pub stages: Vec<StageRecord>,
    pub wall_clock: BTreeMap<String, f64>,
    pub motions: BTreeMap<u32, MotionParams>,
    #[serde(default)]
    pub nets: BTreeMap<u32, DeformNet>,
    #[serde(default)]
    pub mask_collapse: bool,
    /// Hex fingerprint of the final cloud's exact bits.
    pub cloud_fingerprint: String,
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
}

impl RunManifest {
    pub fn from_state(
        state: &PipelineState,
        mode: RunMode,
        known_type: Option<MotionType>,
        dataset: &str,
        cfg: &PipelineConfig,
        complete: bool,
    ) -> Self {
        let mut wall_clock = BTreeMap::new();
        for r in &state.log {
            *wall_clock.entry(format!("{}_{}", r.stage, r.part_id)).or_insert(0.0) += r.wall_seconds;
        }
        Self {
            schema_version: MANIFEST_SCHEMA,
            mode,
            known_type,
            dataset: dataset.to_string(),
            config: cfg.clone(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            complete,
            stages: state.log.clone(),
            wall_clock,
            motions: state.motions.clone(),
            nets: state.nets.clone(),
            mask_collapse: state.mask_collapse,
            cloud_fingerprint: fingerprint_hex(&state.cloud),
            artifacts: BTreeMap::new(),
            report: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.schema_version != MANIFEST_SCHEMA {
            return Err(Error::Config(format!("unsupported manifest schema_version {}", m.schema_version)));
        }
        m.config.validate()?;
        if m.config.hash() != m.config_hash {
            return Err(Error::ContractViolation("manifest config does not match its recorded hash".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

pub fn fingerprint_hex(cloud: &crate::gaussian::GaussianCloud) -> String {
    format!("{:016x}", cloud.fingerprint())
}

/// Re-executes the run a manifest describes. Bit-identical to the original
/// when both ran with `threads = 1`.
pub fn replay(manifest: &RunManifest, states: &[Vec<View>]) -> Result<PipelineState> {
    run(manifest.mode, states, &manifest.config, manifest.known_type, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::GaussianCloud;

    #[test]
    fn hash_mismatch_is_rejected() {
        let cfg = PipelineConfig::default();
        let state = PipelineState::new(GaussianCloud::new(1), 0);
        let mut m = RunManifest::from_state(&state, RunMode::Single, None, "d", &cfg, true);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        assert_eq!(RunManifest::load(&p).unwrap(), m);
        m.config.seed = 5;
        m.save(&p).unwrap();
        assert!(matches!(RunManifest::load(&p), Err(Error::ContractViolation(_))));
    }
}
