//! Revolute and prismatic joints and their rigid transforms.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::rotation::{self, Quat};

const MIN_AXIS_NORM: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionType {
    Revolute,
    Prismatic,
}

impl std::fmt::Display for MotionType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MotionType::Revolute => "revolute",
            MotionType::Prismatic => "prismatic",
        })
    }
}

/// One-DOF joint. Axes are stored unnormalized and normalized on use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "MotionRecord", try_from = "MotionRecord")]
pub enum MotionParams {
    Revolute {
        axis: Vector3<f64>,
        pivot: Vector3<f64>,
        /// Radians.
        angle: f64,
    },
    Prismatic {
        axis: Vector3<f64>,
        distance: f64,
    },
}

/// Manifest form: `{type, axis, pivot?, magnitude}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionRecord {
    #[serde(rename = "type")]
    pub kind: MotionType,
    pub axis: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivot: Option<[f64; 3]>,
    pub magnitude: f64,
}

impl From<MotionParams> for MotionRecord {
    fn from(m: MotionParams) -> Self {
        match m {
            MotionParams::Revolute { axis, pivot, angle } => MotionRecord {
                kind: MotionType::Revolute,
                axis: axis.into(),
                pivot: Some(pivot.into()),
                magnitude: angle,
            },
            MotionParams::Prismatic { axis, distance } => MotionRecord {
                kind: MotionType::Prismatic,
                axis: axis.into(),
                pivot: None,
                magnitude: distance,
            },
        }
    }
}

impl TryFrom<MotionRecord> for MotionParams {
    type Error = String;

    fn try_from(r: MotionRecord) -> std::result::Result<Self, String> {
        Ok(match r.kind {
            MotionType::Revolute => MotionParams::Revolute {
                axis: r.axis.into(),
                pivot: r.pivot.ok_or("revolute joint needs a pivot")?.into(),
                angle: r.magnitude,
            },
            MotionType::Prismatic => MotionParams::Prismatic {
                axis: r.axis.into(),
                distance: r.magnitude,
            },
        })
    }
}

impl MotionParams {
    pub fn kind(&self) -> MotionType {
        match self {
            MotionParams::Revolute { .. } => MotionType::Revolute,
            MotionParams::Prismatic { .. } => MotionType::Prismatic,
        }
    }

    pub fn axis(&self) -> Vector3<f64> {
        match self {
            MotionParams::Revolute { axis, .. } | MotionParams::Prismatic { axis, .. } => *axis,
        }
    }

    /// Joint state: angle (radians) or distance.
    pub fn magnitude(&self) -> f64 {
        match self {
            MotionParams::Revolute { angle, .. } => *angle,
            MotionParams::Prismatic { distance, .. } => *distance,
        }
    }

    /// Same joint with a unit axis; transforms are unchanged.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        match &mut out {
            MotionParams::Revolute { axis, .. } | MotionParams::Prismatic { axis, .. } => {
                let n = axis.norm();
                if n > 0.0 {
                    *axis /= n;
                }
            }
        }
        out
    }

    /// Same joint driven in the opposite direction.
    pub fn inverse(&self) -> Self {
        match self.clone() {
            MotionParams::Revolute { axis, pivot, angle } => MotionParams::Revolute { axis, pivot, angle: -angle },
            MotionParams::Prismatic { axis, distance } => MotionParams::Prismatic { axis, distance: -distance },
        }
    }

    /// Flat optimizer layout: revolute `[l; p; θ]`, prismatic `[a; d]`.
    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            MotionParams::Revolute { axis, pivot, angle } => {
                vec![axis.x, axis.y, axis.z, pivot.x, pivot.y, pivot.z, *angle]
            }
            MotionParams::Prismatic { axis, distance } => vec![axis.x, axis.y, axis.z, *distance],
        }
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        match self {
            MotionParams::Revolute { axis, pivot, angle } => {
                *axis = Vector3::new(v[0], v[1], v[2]);
                *pivot = Vector3::new(v[3], v[4], v[5]);
                *angle = v[6];
            }
            MotionParams::Prismatic { axis, distance } => {
                *axis = Vector3::new(v[0], v[1], v[2]);
                *distance = v[3];
            }
        }
    }

    pub fn flat_len(&self) -> usize {
        match self {
            MotionParams::Revolute { .. } => 7,
            MotionParams::Prismatic { .. } => 4,
        }
    }
}

/// A joint evaluated at interpolation `t` with its rotation precomputed.
#[derive(Clone, Debug)]
pub struct JointTransform {
    params: MotionParams,
    t: f64,
    axis_unit: Vector3<f64>,
    quat: Quat,
    rot: Matrix3<f64>,
}

impl JointTransform {
    pub fn new(params: &MotionParams, t: f64) -> Result<Self> {
        let axis = params.axis();
        let n = axis.norm();
        if !(n > MIN_AXIS_NORM) || !n.is_finite() {
            return Err(Error::DegenerateAxis(n));
        }
        let axis_unit = axis / n;
        let (quat, rot) = match params {
            MotionParams::Revolute { angle, .. } => {
                let q = rotation::quat_from_axis_angle(&axis_unit, angle * t);
                (q, rotation::quat_to_rotmat(&q))
            }
            MotionParams::Prismatic { .. } => (rotation::IDENTITY, Matrix3::identity()),
        };
        Ok(Self {
            params: params.clone(),
            t,
            axis_unit,
            quat,
            rot,
        })
    }

    pub fn apply_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        match &self.params {
            MotionParams::Revolute { pivot, .. } => self.rot * (x - pivot) + pivot,
            MotionParams::Prismatic { distance, .. } => x + self.axis_unit * (distance * self.t),
        }
    }

    /// Transformed rotation `q ⊗ r`, without renormalization.
    pub fn apply_rotation(&self, r: &Quat) -> Quat {
        match self.params {
            MotionParams::Revolute { .. } => rotation::quat_mul(&self.quat, r),
            MotionParams::Prismatic { .. } => *r,
        }
    }

    /// Backpropagates dL/dx̂ (and dL/dr̂ for revolute joints) into the flat
    /// parameter gradient `d_params`, returning `(dL/dx, dL/dr)`.
    pub fn vjp(
        &self,
        x: &Vector3<f64>,
        r: &Quat,
        d_xhat: &Vector3<f64>,
        d_rhat: &Quat,
        d_params: &mut [f64],
    ) -> (Vector3<f64>, Quat) {
        match &self.params {
            MotionParams::Revolute { axis, pivot, .. } => {
                let rel = x - pivot;
                let d_rot = d_xhat * rel.transpose();
                let d_pivot = d_xhat - self.rot.transpose() * d_xhat;
                let (dq_mul, d_r) = rotation::quat_mul_vjp(&self.quat, r, d_rhat);
                let dq = rotation::rotmat_vjp(&self.quat, &d_rot) + dq_mul;
                let half = 0.5 * self.params.magnitude() * self.t;
                let (s, c) = half.sin_cos();
                let dvec = Vector3::new(dq[1], dq[2], dq[3]);
                let d_angle = self.t * (-0.5 * s * dq[0] + 0.5 * c * dvec.dot(&self.axis_unit));
                let d_axis = rotation::normalize3_vjp(axis, &(dvec * s));
                for k in 0..3 {
                    d_params[k] += d_axis[k];
                    d_params[3 + k] += d_pivot[k];
                }
                d_params[6] += d_angle;
                (self.rot.transpose() * d_xhat, d_r)
            }
            MotionParams::Prismatic { axis, distance } => {
                let d_unit = d_xhat * (distance * self.t);
                let d_axis = rotation::normalize3_vjp(axis, &d_unit);
                for k in 0..3 {
                    d_params[k] += d_axis[k];
                }
                d_params[3] += self.t * self.axis_unit.dot(d_xhat);
                (*d_xhat, *d_rhat)
            }
        }
    }
}

/// Revolute transform `x̂ = R(x - p) + p`, `r̂ = q ⊗ r` (renormalized).
pub fn transform_revolute(x: &Vector3<f64>, r: &Quat, params: &MotionParams) -> Result<(Vector3<f64>, Quat)> {
    if params.kind() != MotionType::Revolute {
        return Err(Error::Config("transform_revolute needs revolute parameters".into()));
    }
    let j = JointTransform::new(params, 1.0)?;
    let rh = j.apply_rotation(r);
    Ok((j.apply_point(x), rotation::try_normalize(&rh, 1e-12).unwrap_or(rh)))
}

/// Prismatic transform `x̂ = x + d·a/‖a‖`.
pub fn transform_prismatic(x: &Vector3<f64>, params: &MotionParams) -> Result<Vector3<f64>> {
    if params.kind() != MotionType::Prismatic {
        return Err(Error::Config("transform_prismatic needs prismatic parameters".into()));
    }
    Ok(JointTransform::new(params, 1.0)?.apply_point(x))
}

/// Applies `params` scaled by `t` to every Gaussian labeled `part_id`.
pub fn transform_cloud(cloud: &GaussianCloud, part_id: u32, params: &MotionParams, t: f64) -> Result<GaussianCloud> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("interpolation t = {t} outside [0, 1]")));
    }
    transform_cloud_unchecked(cloud, part_id, params, t)
}

/// [`transform_cloud`] without the `t ∈ [0, 1]` check, used for inverse posing.
pub(crate) fn transform_cloud_unchecked(
    cloud: &GaussianCloud,
    part_id: u32,
    params: &MotionParams,
    t: f64,
) -> Result<GaussianCloud> {
    let j = JointTransform::new(params, t)?;
    let mut out = cloud.clone();
    for g in out.gaussians.iter_mut().filter(|g| g.mask == part_id) {
        g.position = j.apply_point(&g.position);
        let r = j.apply_rotation(&g.rotation);
        g.rotation = rotation::try_normalize(&r, 1e-12).unwrap_or(r);
    }
    Ok(out)
}
