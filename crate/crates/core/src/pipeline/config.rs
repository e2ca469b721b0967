use serde::{Deserialize, Serialize};

use crate::deform::DeformConfig;
use crate::error::{Error, Result};
use crate::motion::MaskConfig;
use crate::render::AppearanceLossConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Adam learning rates per attribute group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    /// Position rate decays exponentially from `position` to `position_final`.
    pub position: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    /// Joint parameters; decays to `motion_final` over a stage.
    pub motion: f64,
    pub motion_final: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1e-3,
            position_final: 1e-5,
            rotation: 2e-3,
            log_scale: 5e-3,
            opacity: 5e-2,
            sh_dc: 5e-3,
            sh_rest: 2.5e-4,
            motion: 2e-3,
            motion_final: 1e-4,
        }
    }
}

impl LearningRates {
    fn all(&self) -> [(&'static str, f64); 9] {
        [
            ("position", self.position),
            ("position_final", self.position_final),
            ("rotation", self.rotation),
            ("log_scale", self.log_scale),
            ("opacity", self.opacity),
            ("sh_dc", self.sh_dc),
            ("sh_rest", self.sh_rest),
            ("motion", self.motion),
            ("motion_final", self.motion_final),
        ]
    }
}

/// Adaptive density control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    pub interval: usize,
    /// First step (within a stage) at which densification may run.
    pub start: usize,
    /// Densification stops after this fraction of a stage's steps.
    pub stop_fraction: f64,
    /// Threshold on the mean view-space positional gradient, in NDC units.
    pub grad_threshold: f64,
    /// Gaussians whose largest scale exceeds this are split, others cloned.
    pub split_scale: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            start: 300,
            stop_fraction: 0.7,
            grad_threshold: 2e-4,
            split_scale: 0.025,
            prune_opacity: 0.005,
            max_gaussians: 3000,
        }
    }
}

/// Whole-pipeline configuration; the manifest stores it verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub sh_degree: usize,
    pub init_points: usize,
    pub init_opacity: f64,
    pub static_steps: usize,
    pub motion_steps: usize,
    pub joint_steps: usize,
    /// Fraction of the motion budget after which the joint type is checked.
    pub type_check_fraction: f64,
    /// Minimum movable Gaussians for motion fitting.
    pub min_movable: usize,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub deform: DeformConfig,
    pub mask: MaskConfig,
    pub loss: AppearanceLossConfig,
    /// Render worker threads; 1 is the bit-reproducible sequential mode.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            sh_degree: 1,
            init_points: 2000,
            init_opacity: 0.1,
            static_steps: 3000,
            motion_steps: 1000,
            joint_steps: 3000,
            type_check_fraction: 0.4,
            min_movable: 10,
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            deform: DeformConfig::default(),
            mask: MaskConfig::default(),
            loss: AppearanceLossConfig::default(),
            threads: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return Err(Error::Config(format!("sh_degree {} above {}", self.sh_degree, crate::sh::MAX_DEGREE)));
        }
        if self.init_points == 0 || !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(Error::Config("init_points >= 1 and init_opacity in (0, 1) required".into()));
        }
        if self.motion_steps == 0 || self.joint_steps == 0 || self.deform.steps == 0 {
            return Err(Error::Config("stage iteration counts must be at least 1".into()));
        }
        if !(self.type_check_fraction > 0.0 && self.type_check_fraction < 1.0) {
            return Err(Error::Config("type_check_fraction must lie in (0, 1)".into()));
        }
        for (name, v) in self.lr.all() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("learning rate {name} = {v} must be positive")));
            }
        }
        let d = &self.densify;
        if d.interval == 0 || !(d.grad_threshold > 0.0) || !(d.prune_opacity > 0.0) || !(d.split_scale > 0.0) {
            return Err(Error::Config("densify interval and thresholds must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.deform.validate()?;
        self.mask.validate()?;
        self.loss.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
