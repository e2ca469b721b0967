use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::MotionParams;
use super::MotionType;
use crate::error::{Error, Result};

/// Movable-mask threshold and the pivot radius of the type rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub tau: f64,
    /// Threshold used when reclassifying before the joint stage.
    pub tau_joint: f64,
    pub pivot_radius: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            tau_joint: 0.1,
            pivot_radius: 1.0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau", self.tau), ("tau_joint", self.tau_joint)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} = {t} outside (0, 1)")));
            }
        }
        if !(self.pivot_radius > 0.0) {
            return Err(Error::Config(format!("pivot_radius = {} must be positive", self.pivot_radius)));
        }
        Ok(())
    }
}

/// Displacement norms min-max normalized to `[0, 1]`.
pub fn normalized_displacement(dx: &[Vector3<f64>]) -> Result<Vec<f64>> {
    if dx.len() < 2 {
        return Err(Error::DegenerateField(0.0));
    }
    let v: Vec<f64> = dx.iter().map(|d| d.norm()).collect();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::DegenerateField(range));
    }
    Ok(v.iter().map(|x| (x - lo) / range).collect())
}

/// Labels `part_id` wherever the normalized displacement reaches `tau`, 0 elsewhere.
pub fn classify_movable(dx: &[Vector3<f64>], tau: f64, part_id: u32) -> Result<Vec<u32>> {
    Ok(normalized_displacement(dx)?
        .into_iter()
        .map(|n| if n >= tau { part_id } else { 0 })
        .collect())
}

/// Prismatic when the axis passes farther than `radius` from the origin.
///
/// The distance is measured from the origin to the axis line, using the point
/// of the line closest to the origin as `p`; with the pivot free to slide
/// along the axis this is the only position-independent reading of `‖p‖`.
pub fn detect_motion_type(params: &MotionParams, radius: f64) -> MotionType {
    match params {
        MotionParams::Revolute { axis, pivot, .. } => {
            let n = axis.norm();
            let p = if n > 0.0 {
                let u = axis / n;
                pivot - u * u.dot(pivot)
            } else {
                *pivot
            };
            if p.norm() > radius {
                MotionType::Prismatic
            } else {
                MotionType::Revolute
            }
        }
        MotionParams::Prismatic { .. } => MotionType::Prismatic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norms(v: &[f64]) -> Vec<Vector3<f64>> {
        v.iter().map(|&x| Vector3::new(x, 0.0, 0.0)).collect()
    }

    #[test]
    fn examples() {
        assert_eq!(classify_movable(&norms(&[0.0, 0.1, 1.0]), 0.3, 1).unwrap(), vec![0, 0, 1]);
        assert_eq!(classify_movable(&norms(&[0.0, 1.0]), 0.3, 1).unwrap(), vec![0, 1]);
        let v = [0.0, 0.93, 0.97, 1.0, 0.91, 0.95];
        assert_eq!(classify_movable(&norms(&v), 0.3, 2).unwrap(), vec![0, 2, 2, 2, 2, 2]);
        assert!(matches!(classify_movable(&norms(&[0.4, 0.4]), 0.3, 1), Err(Error::DegenerateField(_))));
    }

    #[test]
    fn type_rule() {
        let rev = |p: [f64; 3]| MotionParams::Revolute {
            axis: Vector3::z(),
            pivot: p.into(),
            angle: 0.5,
        };
        assert_eq!(detect_motion_type(&rev([2.0, 0.0, 0.0]), 1.0), MotionType::Prismatic);
        assert_eq!(detect_motion_type(&rev([0.5, 0.0, 0.0]), 1.0), MotionType::Revolute);
        assert_eq!(detect_motion_type(&rev([0.0; 3]), 1.0), MotionType::Revolute);
        assert_eq!(detect_motion_type(&rev([0.5, 0.0, 3.0]), 1.0), MotionType::Revolute);
    }

    #[test]
    fn config_validation() {
        assert!(MaskConfig::default().validate().is_ok());
        assert!(MaskConfig { tau: 1.0, ..Default::default() }.validate().is_err());
        assert!(MaskConfig { pivot_radius: 0.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn rescaling_invariant(v in prop::collection::vec(0.0f64..5.0, 2..30), s in 0.01f64..100.0, tau in 0.05f64..0.95) {
            let a = classify_movable(&norms(&v), tau, 1);
            let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
            let b = classify_movable(&norms(&scaled), tau, 1);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    let n = normalized_displacement(&norms(&v)).unwrap();
                    for i in 0..v.len() {
                        if (n[i] - tau).abs() > 1e-9 {
                            prop_assert_eq!(a[i], b[i]);
                        }
                    }
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "degeneracy changed under rescaling"),
            }
        }
    }
}
