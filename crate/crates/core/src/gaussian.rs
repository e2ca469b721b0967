//! Part-aware Gaussian scene representation.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::rotation::{self, Quat};
use crate::sh::{self, ShCoeffs, MAX_COEFFS};

/// Logistic function used for opacity.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic Gaussian with its movable-part label.
///
/// `log_scale` is per-axis `ln(σ)`, `opacity_logit` passes through
/// [`sigmoid`], and `rotation` is a unit quaternion in `(w, x, y, z)` order.
/// `mask` is 0 for the static base and `k >= 1` for movable part `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub rotation: Quat,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub sh: ShCoeffs,
    pub mask: u32,
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance3d(&self.rotation, &self.log_scale)
    }

    /// Isotropic Gaussian with a flat color.
    pub fn isotropic(position: Vector3<f64>, sigma: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        let mut coeffs = [[0.0; 3]; MAX_COEFFS];
        coeffs[0] = sh::dc_from_rgb(rgb);
        Self {
            position,
            rotation: rotation::IDENTITY,
            log_scale: Vector3::repeat(sigma.ln()),
            opacity_logit: logit(opacity),
            sh: coeffs,
            mask: 0,
        }
    }
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance3d(rotation: &Quat, log_scale: &Vector3<f64>) -> Matrix3<f64> {
    let m = rotation::quat_to_rotmat(rotation) * Matrix3::from_diagonal(&log_scale.map(f64::exp));
    m * m.transpose()
}

/// Ordered Gaussians sharing one SH degree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub sh_degree: usize,
    pub gaussians: Vec<Gaussian>,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            gaussians: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.position).collect()
    }

    pub fn masks(&self) -> Vec<u32> {
        self.gaussians.iter().map(|g| g.mask).collect()
    }

    /// Renormalizes every rotation. Zero quaternions reset to identity.
    pub fn renormalize_rotations(&mut self) {
        for g in &mut self.gaussians {
            g.rotation = rotation::try_normalize(&g.rotation, 1e-12).unwrap_or(rotation::IDENTITY);
        }
    }

    /// Stable 64-bit fingerprint of every attribute, used to tie render
    /// buffers to the cloud they came from.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.sh_degree.hash(&mut h);
        self.gaussians.len().hash(&mut h);
        for g in &self.gaussians {
            for v in g.position.iter().chain(g.rotation.iter()).chain(g.log_scale.iter()) {
                v.to_bits().hash(&mut h);
            }
            g.opacity_logit.to_bits().hash(&mut h);
            for k in g.sh.iter().take(sh::coeff_count(self.sh_degree)) {
                for v in k {
                    v.to_bits().hash(&mut h);
                }
            }
            g.mask.hash(&mut h);
        }
        h.finish()
    }
}

/// Index views of a cloud partitioned by one part label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSplit {
    pub movable: Vec<usize>,
    pub unmovable: Vec<usize>,
}

/// Partitions Gaussians into those labeled `part_id` and the rest, keeping
/// cloud order within each side.
pub fn split_by_mask(cloud: &GaussianCloud, part_id: u32) -> MaskSplit {
    let (movable, unmovable) = (0..cloud.len()).partition(|&i| cloud.gaussians[i].mask == part_id);
    MaskSplit { movable, unmovable }
}
