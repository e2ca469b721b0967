//! Isolated deformation prediction toward the end state.

mod arap;
mod net;

pub use arap::{arap_loss, arap_loss_raw, knn_build, ArapValue, KnnGraph};
pub use net::{DeformArch, DeformNet, DeformationField, ForwardCache, OUTPUT_DIM};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::optim::{adam_step, AdamState};
use crate::render::{self, AppearanceLossConfig, RenderOptions};
use crate::rotation::{self, Quat};
use crate::view::View;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda_arap: f64,
    pub knn: usize,
    pub lambda_omega: f64,
    /// ARAP uses every node up to this count, else a fresh uniform sample.
    pub arap_sample: usize,
    pub arch: DeformArch,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            lambda_arap: 1.0,
            knn: 20,
            lambda_omega: 20.0,
            arap_sample: 5000,
            arch: DeformArch::default(),
        }
    }
}

impl DeformConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.lambda_arap < 0.0 || self.knn == 0 || self.arap_sample == 0 {
            return Err(Error::Config("deform: lr > 0, lambda_arap >= 0, knn >= 1, arap_sample >= 1 required".into()));
        }
        self.arch.validate()
    }
}

/// Deformed cloud with `r + δr` renormalized.
pub fn apply_deformation(cloud: &GaussianCloud, field: &DeformationField) -> Result<GaussianCloud> {
    if field.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!("field {} vs cloud {}", field.len(), cloud.len())));
    }
    let mut out = cloud.clone();
    for (i, g) in out.gaussians.iter_mut().enumerate() {
        g.position += field.dx[i];
        let raw = g.rotation + field.dr[i];
        g.rotation = rotation::try_normalize(&raw, 1e-8).ok_or(Error::DegenerateRotation {
            index: i,
            norm: raw.norm(),
        })?;
    }
    Ok(out)
}

/// Per-step losses of a deformation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeformTrace {
    pub total: Vec<f64>,
    pub appearance: Vec<f64>,
    pub arap: Vec<f64>,
    pub camera: Vec<usize>,
}

pub struct DeformOutcome {
    pub net: DeformNet,
    pub field: DeformationField,
    pub trace: DeformTrace,
}

/// Trains `net` so that the deformed (frozen) cloud reproduces `views`.
pub fn train_deform(
    cloud: &GaussianCloud,
    views: &[View],
    mut net: DeformNet,
    cfg: &DeformConfig,
    loss_cfg: &AppearanceLossConfig,
    opts: &RenderOptions,
    seed: u64,
) -> Result<DeformOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if views.is_empty() {
        return Err(Error::EmptySet("deformation views"));
    }
    let n = cloud.len();
    let positions = cloud.positions();
    let graph = knn_build(&positions, cfg.knn, cfg.lambda_omega)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(net.param_count());
    let mut trace = DeformTrace::default();
    let full: Vec<usize> = (0..n).collect();
    let mut work = cloud.clone();
    for it in 0..cfg.steps {
        let cam_id = rng.random_range(0..views.len());
        let view = &views[cam_id];
        let cache = net.forward_cached(&positions);
        let field = cache.field();
        let mut raw_rot: Vec<Quat> = Vec::with_capacity(n);
        for (i, g) in work.gaussians.iter_mut().enumerate() {
            let base = &cloud.gaussians[i];
            g.position = base.position + field.dx[i];
            g.rotation = base.rotation + field.dr[i];
            raw_rot.push(g.rotation);
        }
        let rendered = render::rasterize(&work, &view.camera, opts);
        let app = render::loss_app(&rendered.image, &view.image, loss_cfg)?;
        let grads = render::rasterize_backward(&work, &view.camera, &rendered, &app.grad)?;
        let sample = if n <= cfg.arap_sample {
            full.clone()
        } else {
            rand::seq::index::sample(&mut rng, n, cfg.arap_sample).into_vec()
        };
        let moved: Vec<_> = work.positions();
        let arap = arap_loss_raw(cloud, &moved, &raw_rot, &graph, &sample)?;
        let total = app.value + cfg.lambda_arap * arap.value;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: "deform",
                iteration: it,
                camera: cam_id,
            });
        }
        let d_dx: Vec<_> = (0..n).map(|i| grads.position[i] + arap.d_position[i] * cfg.lambda_arap).collect();
        let d_dr: Vec<_> = (0..n).map(|i| grads.rotation[i] + arap.d_rotation[i] * cfg.lambda_arap).collect();
        let g = net.backward(&cache, &d_dx, &d_dr);
        adam_step(&mut net.params, &g, &mut adam, cfg.lr, "deform_net")?;
        trace.total.push(total);
        trace.appearance.push(app.value);
        trace.arap.push(arap.value);
        trace.camera.push(cam_id);
    }
    let field = net.forward(&positions);
    Ok(DeformOutcome { net, field, trace })
}
