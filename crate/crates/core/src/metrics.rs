//! Evaluation against ground truth: joint errors, part Chamfer, image quality
//! and segmentation.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::image::Image;
use crate::motion::{chamfer_distance, MotionParams};
use crate::render::{self, rasterize, RenderOptions};
use crate::spatial;
use crate::synth::GroundTruth;
use crate::view::View;

/// Gaussians fainter than this are ignored by geometric and label metrics.
pub const MIN_OPACITY: f64 = 0.05;
pub const PSNR_CAP: f64 = 100.0;

/// Angle between two axis lines in degrees, in `[0, 90]`.
pub fn axis_angle_error(pred: &Vector3<f64>, gt: &Vector3<f64>) -> Result<f64> {
    let (np, ng) = (pred.norm(), gt.norm());
    if !(np > 0.0) || !(ng > 0.0) {
        return Err(Error::DegenerateAxis(np.min(ng)));
    }
    Ok((pred.dot(gt).abs() / (np * ng)).min(1.0).acos().to_degrees())
}

/// Distance from `pivot` to the line through `point` along `direction`.
pub fn pivot_pos_error(pivot: &Vector3<f64>, point: &Vector3<f64>, direction: &Vector3<f64>) -> f64 {
    let u = direction.normalize();
    let r = pivot - point;
    (r - u * u.dot(&r)).norm()
}

/// Joint-state error (degrees or scene units); `None` when the types differ.
pub fn joint_state_error(pred: &MotionParams, gt: &MotionParams) -> Option<f64> {
    if pred.kind() != gt.kind() {
        return None;
    }
    let sign = if pred.axis().dot(&gt.axis()) < 0.0 { -1.0 } else { 1.0 };
    let err = (pred.magnitude() * sign - gt.magnitude()).abs();
    Some(match gt {
        MotionParams::Revolute { .. } => err.to_degrees(),
        MotionParams::Prismatic { .. } => err,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionReport {
    pub ang_err: f64,
    pub pos_err: Option<f64>,
    pub geo_dist: Option<f64>,
    pub type_correct: bool,
}

pub fn motion_report(pred: &MotionParams, gt: &MotionParams) -> Result<MotionReport> {
    let pos_err = match (pred, gt) {
        (MotionParams::Revolute { pivot, .. }, MotionParams::Revolute { pivot: gp, axis, .. }) => {
            Some(pivot_pos_error(pivot, gp, axis))
        }
        _ => None,
    };
    Ok(MotionReport {
        ang_err: axis_angle_error(&pred.axis(), &gt.axis())?,
        pos_err,
        geo_dist: joint_state_error(pred, gt),
        type_correct: pred.kind() == gt.kind(),
    })
}

/// Chamfer ×10³ of static, dynamic and whole subsets; `None` marks an empty
/// predicted subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub cd_s: Option<f64>,
    pub cd_d: Option<f64>,
    pub cd_w: Option<f64>,
    pub failed: bool,
}

fn visible_positions(cloud: &GaussianCloud, keep: impl Fn(u32) -> bool) -> Vec<Vector3<f64>> {
    cloud
        .gaussians
        .iter()
        .filter(|g| g.opacity() >= MIN_OPACITY && keep(g.mask))
        .map(|g| g.position)
        .collect()
}

/// Compares predicted static (label 0), dynamic (`part_id`) and whole clouds
/// against ground-truth samples.
pub fn part_chamfer(
    pred: &GaussianCloud,
    part_id: u32,
    gt_static: &[Vector3<f64>],
    gt_dynamic: &[Vector3<f64>],
    gt_whole: &[Vector3<f64>],
) -> Result<GeometryReport> {
    let cd = |p: &[Vector3<f64>], g: &[Vector3<f64>]| -> Result<Option<f64>> {
        if p.is_empty() {
            return Ok(None);
        }
        Ok(Some(chamfer_distance(p, g)?.value * 1e3))
    };
    let cd_s = cd(&visible_positions(pred, |m| m == 0), gt_static)?;
    let cd_d = cd(&visible_positions(pred, |m| m == part_id), gt_dynamic)?;
    let cd_w = cd(&visible_positions(pred, |_| true), gt_whole)?;
    Ok(GeometryReport {
        failed: cd_s.is_none() || cd_d.is_none(),
        cd_s,
        cd_d,
        cd_w,
    })
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// SSIM with the training window (11 px, σ = 1.5).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    render::ssim(a, b, 11, 1.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualReport {
    pub psnr_s: f64,
    pub psnr_e: f64,
    pub ssim_s: f64,
    pub ssim_e: f64,
}

/// Mean PSNR and SSIM of `cloud` rendered into `views`.
pub fn image_quality(cloud: &GaussianCloud, views: &[View], opts: &RenderOptions) -> Result<(f64, f64)> {
    if views.is_empty() {
        return Err(Error::EmptySet("evaluation views"));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for v in views {
        let img = rasterize(cloud, &v.camera, opts).image;
        p += psnr(&img, &v.image)?;
        s += ssim(&img, &v.image)?;
    }
    Ok((p / views.len() as f64, s / views.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub accuracy: f64,
    /// IoU per label present in either prediction or ground truth.
    pub iou: BTreeMap<u32, f64>,
    pub evaluated: usize,
}

impl SegmentationReport {
    /// Mean IoU over movable labels.
    pub fn movable_iou(&self) -> f64 {
        let v: Vec<f64> = self.iou.iter().filter(|(&k, _)| k != 0).map(|(_, &v)| v).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Label agreement with the ground truth over explicit label vectors.
pub fn segmentation_accuracy(pred: &[u32], gt: &[u32]) -> Result<SegmentationReport> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!("{} predicted vs {} gt labels", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptySet("segmentation labels"));
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    let labels: BTreeSet<u32> = pred.iter().chain(gt).copied().collect();
    let iou = labels
        .into_iter()
        .map(|l| {
            let inter = pred.iter().zip(gt).filter(|(&a, &b)| a == l && b == l).count();
            let union = pred.iter().zip(gt).filter(|(&a, &b)| a == l || b == l).count();
            (l, inter as f64 / union as f64)
        })
        .collect();
    Ok(SegmentationReport {
        accuracy: hits as f64 / pred.len() as f64,
        iou,
        evaluated: pred.len(),
    })
}

/// Segmentation of a predicted cloud; each Gaussian's true label is the label
/// of the nearest ground-truth point posed in the same state.
pub fn cloud_segmentation(pred: &GaussianCloud, gt_points: &[Vector3<f64>], gt_labels: &[u32]) -> Result<SegmentationReport> {
    let vis: Vec<_> = pred.gaussians.iter().filter(|g| g.opacity() >= MIN_OPACITY).collect();
    let pos: Vec<_> = vis.iter().map(|g| g.position).collect();
    let truth: Vec<u32> = spatial::nearest(&pos, gt_points).iter().map(|&(j, _)| gt_labels[j]).collect();
    let labels: Vec<u32> = vis.iter().map(|g| g.mask).collect();
    segmentation_accuracy(&labels, &truth)
}

/// All reports for one reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub motion: BTreeMap<u32, MotionReport>,
    pub geometry: BTreeMap<u32, GeometryReport>,
    pub visual: Option<VisualReport>,
    pub segmentation: SegmentationReport,
}

/// Evaluates a cloud in the first state together with its predicted joints.
/// `holdout[s]` are views of ground-truth state `s`; the visual report uses
/// the first and last states and is skipped when either has no views.
pub fn evaluate(
    cloud: &GaussianCloud,
    motions: &BTreeMap<u32, MotionParams>,
    gt: &GroundTruth,
    holdout: &[Vec<View>],
    opts: &RenderOptions,
) -> Result<EvalReport> {
    let mut motion = BTreeMap::new();
    let mut geometry = BTreeMap::new();
    let gt_static = gt.part_points(0, Some(0));
    let gt_whole = gt.part_points(0, None);
    for (&id, gm) in &gt.motions {
        if let Some(pm) = motions.get(&id) {
            motion.insert(id, motion_report(pm, gm)?);
        }
        geometry.insert(id, part_chamfer(cloud, id, &gt_static, &gt.part_points(0, Some(id)), &gt_whole)?);
    }
    let last = gt.states.len().saturating_sub(1);
    let visual = match (holdout.first(), holdout.get(last)) {
        (Some(v0), Some(v1)) if !v0.is_empty() && !v1.is_empty() && last > 0 => {
            let mut end = cloud.clone();
            for (&id, m) in motions {
                let t = gt.states[last].get(id as usize - 1).copied().unwrap_or(1.0);
                end = crate::motion::transform_cloud_unchecked(&end, id, m, t)?;
            }
            let (psnr_s, ssim_s) = image_quality(cloud, v0, opts)?;
            let (psnr_e, ssim_e) = image_quality(&end, v1, opts)?;
            Some(VisualReport {
                psnr_s,
                psnr_e,
                ssim_s,
                ssim_e,
            })
        }
        _ => None,
    };
    let segmentation = cloud_segmentation(cloud, &gt.points[0], &gt.labels)?;
    Ok(EvalReport {
        motion,
        geometry,
        visual,
        segmentation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn axis_examples() {
        let g = Vector3::new(0.3, -0.2, 0.9);
        assert_relative_eq!(axis_angle_error(&g, &g).unwrap(), 0.0, epsilon = 1e-6);
        assert_relative_eq!(axis_angle_error(&-g, &g).unwrap(), 0.0, epsilon = 1e-6);
        assert_relative_eq!(axis_angle_error(&Vector3::x(), &Vector3::y()).unwrap(), 90.0, epsilon = 1e-12);
        assert!(axis_angle_error(&Vector3::zeros(), &g).is_err());
    }

    #[test]
    fn pivot_examples() {
        let z = Vector3::z();
        assert_eq!(pivot_pos_error(&Vector3::new(0.0, 0.0, 3.0), &Vector3::zeros(), &z), 0.0);
        assert_relative_eq!(pivot_pos_error(&Vector3::x(), &Vector3::zeros(), &z), 1.0);
        assert_relative_eq!(pivot_pos_error(&Vector3::new(1.0, 0.0, 7.5), &Vector3::zeros(), &z), 1.0);
    }

    #[test]
    fn joint_state_examples() {
        let gt = MotionParams::Revolute {
            axis: Vector3::z(),
            pivot: Vector3::zeros(),
            angle: 40f64.to_radians(),
        };
        assert_relative_eq!(joint_state_error(&gt, &gt).unwrap(), 0.0);
        let flipped = MotionParams::Revolute {
            axis: -Vector3::z(),
            pivot: Vector3::zeros(),
            angle: -40f64.to_radians(),
        };
        assert_relative_eq!(joint_state_error(&flipped, &gt).unwrap(), 0.0, epsilon = 1e-12);
        let short = MotionParams::Revolute {
            axis: Vector3::z(),
            pivot: Vector3::zeros(),
            angle: 35f64.to_radians(),
        };
        assert_relative_eq!(joint_state_error(&short, &gt).unwrap(), 5.0, epsilon = 1e-9);
        let pri = MotionParams::Prismatic {
            axis: Vector3::x(),
            distance: 0.4,
        };
        assert!(joint_state_error(&pri, &gt).is_none());
        assert!(!motion_report(&pri, &gt).unwrap().type_correct);
    }

    #[test]
    fn image_metrics() {
        let a = Image::filled(16, 16, [0.3, 0.5, 0.7]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let b = Image {
            data: a.data.iter().map(|v| v + 0.1).collect(),
            ..a.clone()
        };
        assert_relative_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
        assert_relative_eq!(psnr(&Image::filled(16, 16, [0.0; 3]), &Image::filled(16, 16, [1.0; 3])).unwrap(), 0.0);
        assert!(psnr(&a, &Image::new(8, 8)).is_err());
    }

    #[test]
    fn segmentation_examples() {
        let gt = [0, 0, 1, 1];
        let r = segmentation_accuracy(&gt, &gt).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.movable_iou(), 1.0);
        assert_eq!(segmentation_accuracy(&[1, 1, 0, 0], &gt).unwrap().accuracy, 0.0);
        let r = segmentation_accuracy(&[0, 0, 0, 0], &gt).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.movable_iou(), 0.0);
    }

    #[test]
    fn chamfer_report() {
        use crate::gaussian::Gaussian;
        let s = vec![Vector3::zeros(), Vector3::x()];
        let d = vec![Vector3::new(0.0, 2.0, 0.0), Vector3::new(0.0, 3.0, 0.0)];
        let whole: Vec<_> = s.iter().chain(&d).copied().collect();
        let mut cloud = GaussianCloud::new(0);
        for (p, m) in s.iter().map(|p| (p, 0)).chain(d.iter().map(|p| (p, 1))) {
            let mut g = Gaussian::isotropic(*p, 0.01, 0.9, [0.5; 3]);
            g.mask = m;
            cloud.gaussians.push(g);
        }
        let r = part_chamfer(&cloud, 1, &s, &d, &whole).unwrap();
        assert_eq!((r.cd_s, r.cd_d, r.cd_w, r.failed), (Some(0.0), Some(0.0), Some(0.0), false));
        let mut shifted = cloud.clone();
        shifted.gaussians[2].position.x += 0.1;
        let r = part_chamfer(&shifted, 1, &s, &d, &whole).unwrap();
        assert!(r.cd_w.unwrap() <= r.cd_s.unwrap().max(r.cd_d.unwrap()) + 1e-9);
        cloud.gaussians.iter_mut().for_each(|g| g.mask = 0);
        assert!(part_chamfer(&cloud, 1, &s, &d, &whole).unwrap().failed);
    }
}
