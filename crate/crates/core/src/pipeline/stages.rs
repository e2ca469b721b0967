use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::optimizer::{densify_and_prune, CloudOptimizer, DensifyReport, DensifyStats};
use super::state::{PipelineState, StageRecord, StageSnapshot};
use crate::deform::DeformationField;
use crate::error::{Error, Result};
use crate::gaussian::{logit, Gaussian, GaussianCloud};
use crate::motion::{chamfer_distance, classify_movable, detect_motion_type, JointTransform, MotionParams, MotionType};
use crate::optim::{adam_step, exp_decay, AdamState};
use crate::render::{self, GaussianGrads, RenderOptions};
use crate::rotation::{self, Quat};
use crate::sh;
use crate::spatial;
use crate::view::View;

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_WINDOW: usize = 200;

/// Aborts when the loss stays above 10x its first value for 200 steps.
#[derive(Default)]
pub(crate) struct DivergenceGuard {
    initial: Option<f64>,
    over: usize,
}

impl DivergenceGuard {
    pub(crate) fn check(&mut self, stage: &'static str, iteration: usize, camera: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage,
                iteration,
                camera,
            });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.over += 1;
            if self.over >= DIVERGENCE_WINDOW {
                return Err(Error::Divergence {
                    stage,
                    iteration,
                    loss,
                    initial,
                });
            }
        } else {
            self.over = 0;
        }
        Ok(())
    }
}

pub fn render_opts(cfg: &PipelineConfig) -> RenderOptions {
    RenderOptions {
        background: cfg.loss.background,
        threads: cfg.threads,
    }
}

/// Uniform sample of `n` points in the unit ball with random colors and
/// scales from the mean distance to the three nearest neighbors.
pub fn random_init(n: usize, sh_degree: usize, opacity: f64, mask: u32, rng: &mut ChaCha8Rng) -> GaussianCloud {
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if p.norm_squared() <= 1.0 {
            pts.push(p);
        }
    }
    let nn = spatial::knn(&pts, 3);
    let mut cloud = GaussianCloud::new(sh_degree);
    for (p, row) in pts.iter().zip(&nn) {
        let d = if row.is_empty() {
            0.1
        } else {
            row.iter().map(|&(_, d2)| d2.sqrt()).sum::<f64>() / row.len() as f64
        };
        let rgb = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let mut g = Gaussian::isotropic(*p, d.max(1e-4), opacity, rgb);
        g.opacity_logit = logit(opacity);
        g.mask = mask;
        cloud.gaussians.push(g);
    }
    cloud
}

pub(crate) struct Photometric {
    pub loss: f64,
    pub grads: GaussianGrads,
}

pub(crate) fn photometric(cloud: &GaussianCloud, view: &View, cfg: &PipelineConfig) -> Result<Photometric> {
    let rendered = render::rasterize(cloud, &view.camera, &render_opts(cfg));
    let lv = render::loss_app(&rendered.image, &view.image, &cfg.loss)?;
    let grads = render::rasterize_backward(cloud, &view.camera, &rendered, &lv.grad)?;
    Ok(Photometric { loss: lv.value, grads })
}

/// `cloud` with part `part_id` moved by `joint`, rotations left unnormalized
/// so the renderer's gradient chains exactly through [`JointTransform::vjp`].
pub(crate) fn pose_raw(cloud: &GaussianCloud, part_id: u32, joint: &JointTransform) -> GaussianCloud {
    let mut out = cloud.clone();
    for g in out.gaussians.iter_mut().filter(|g| g.mask == part_id) {
        g.position = joint.apply_point(&g.position);
        g.rotation = joint.apply_rotation(&g.rotation);
    }
    out
}

/// Pulls gradients on a posed cloud back to the rest cloud, accumulating
/// joint-parameter gradients into `d_params`.
pub(crate) fn pull_back(
    rest: &GaussianCloud,
    part_id: u32,
    joint: &JointTransform,
    grads: &mut GaussianGrads,
    d_params: &mut [f64],
) {
    for (i, g) in rest.gaussians.iter().enumerate() {
        if g.mask != part_id {
            continue;
        }
        let (dx, dr) = joint.vjp(&g.position, &g.rotation, &grads.position[i], &grads.rotation[i], d_params);
        grads.position[i] = dx;
        grads.rotation[i] = dr;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensifyEvent {
    pub step: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub count: usize,
}

impl DensifyEvent {
    fn new(step: usize, r: &DensifyReport, count: usize) -> Self {
        Self {
            step,
            cloned: r.cloned,
            split: r.split,
            pruned: r.pruned,
            count,
        }
    }
}

pub(crate) fn densify_due(step: usize, steps: usize, cfg: &PipelineConfig) -> bool {
    let d = &cfg.densify;
    let stop = (d.stop_fraction * steps as f64) as usize;
    step >= d.start && step < stop && (step + 1).is_multiple_of(d.interval)
}

pub struct StaticOutcome {
    pub cloud: GaussianCloud,
    pub record: StageRecord,
}

/// Fits a static cloud to `views` from a random initialization.
pub fn train_static(views: &[View], cfg: &PipelineConfig, seed: u64) -> Result<StaticOutcome> {
    cfg.validate()?;
    if views.len() < 8 {
        return Err(Error::Config(format!("static stage needs at least 8 views, got {}", views.len())));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = random_init(cfg.init_points, cfg.sh_degree, cfg.init_opacity, 0, &mut rng);
    let mut record = StageRecord::new("static", 0);
    fit_cloud(&mut cloud, views, cfg, cfg.static_steps, "static", &mut rng, &mut record)?;
    record.wall_seconds = start.elapsed().as_secs_f64();
    Ok(StaticOutcome { cloud, record })
}

/// Photometric optimization of every attribute with density control.
pub(crate) fn fit_cloud(
    cloud: &mut GaussianCloud,
    views: &[View],
    cfg: &PipelineConfig,
    steps: usize,
    stage: &'static str,
    rng: &mut ChaCha8Rng,
    record: &mut StageRecord,
) -> Result<()> {
    let mut opt = CloudOptimizer::new(cloud);
    let mut stats = DensifyStats::new(cloud.len());
    let mut guard = DivergenceGuard::default();
    for it in 0..steps {
        let cam = rng.random_range(0..views.len());
        let view = &views[cam];
        let ph = photometric(cloud, view, cfg)?;
        guard.check(stage, it, cam, ph.loss)?;
        stats.add(&ph.grads, view.camera.width);
        let lr_pos = exp_decay(cfg.lr.position, cfg.lr.position_final, it, steps);
        opt.step(cloud, &ph.grads, &cfg.lr, lr_pos)?;
        record.loss.push(ph.loss);
        if densify_due(it, steps, cfg) {
            let r = densify_and_prune(cloud, &stats, Some(&mut opt), &cfg.densify)?;
            record.densify.push(DensifyEvent::new(it, &r, cloud.len()));
            stats = DensifyStats::new(cloud.len());
        }
    }
    Ok(())
}

/// Rigid fit of `targets` to `points`: rotation axis, angle and the pivot on
/// the axis closest to the centroid. Near-zero rotations leave the pivot far
/// away, which the type rule later reads as a prismatic joint.
pub fn revolute_init(points: &[Vector3<f64>], targets: &[Vector3<f64>]) -> Result<MotionParams> {
    if points.is_empty() || points.len() != targets.len() {
        return Err(Error::DimensionMismatch(format!("{} points vs {} targets", points.len(), targets.len())));
    }
    let n = points.len() as f64;
    let cp = points.iter().sum::<Vector3<f64>>() / n;
    let cq = targets.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in points.iter().zip(targets) {
        h += (p - cp) * (q - cq).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = vt.transpose() * d * u.transpose();
    let t = cq - rot * cp;
    let (mut axis, mut angle) = rotation::rotmat_axis_angle(&rot);
    if angle < 1e-9 {
        let e = [Vector3::x(), Vector3::y(), Vector3::z()]
            .into_iter()
            .min_by(|a, b| a.dot(&t).abs().total_cmp(&b.dot(&t).abs()))
            .unwrap();
        axis = t.cross(&e).try_normalize(1e-12).unwrap_or(Vector3::z());
    }
    angle = angle.max(1e-3);
    let t_perp = t - axis * axis.dot(&t);
    let cot = 1.0 / (0.5 * angle).tan();
    let mut pivot = 0.5 * (t_perp + axis.cross(&t_perp) * cot);
    pivot += axis * axis.dot(&(cp - pivot));
    Ok(MotionParams::Revolute { axis, pivot, angle })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionTrace {
    pub appearance: Vec<f64>,
    pub geometric: Vec<f64>,
    pub switched_at: Option<usize>,
}

pub struct MotionFit {
    pub params: MotionParams,
    pub kind: MotionType,
    pub initial: MotionParams,
    pub record: StageRecord,
}

/// Joint-fitting objective on one view with its gradient in the flat
/// parameter layout of [`MotionParams::to_flat`].
#[derive(Clone, Debug)]
pub struct ParamLoss {
    pub value: f64,
    pub appearance: f64,
    pub geometric: f64,
    pub grad: Vec<f64>,
}

/// Appearance of the cloud with part `part_id` posed at `t = 1`, plus Chamfer
/// between the moved part centers and `targets`.
pub fn param_loss(
    cloud: &GaussianCloud,
    part_id: u32,
    params: &MotionParams,
    targets: &[Vector3<f64>],
    view: &View,
    cfg: &PipelineConfig,
) -> Result<ParamLoss> {
    let joint = JointTransform::new(params, 1.0)?;
    let posed = pose_raw(cloud, part_id, &joint);
    let mut ph = photometric(&posed, view, cfg)?;
    let mut grad = vec![0.0; params.flat_len()];
    pull_back(cloud, part_id, &joint, &mut ph.grads, &mut grad);
    let movable: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.gaussians[i].mask == part_id).collect();
    let moved: Vec<Vector3<f64>> = movable.iter().map(|&i| posed.gaussians[i].position).collect();
    let geo = chamfer_distance(&moved, targets)?;
    for (k, &i) in movable.iter().enumerate() {
        let g = &cloud.gaussians[i];
        joint.vjp(&g.position, &g.rotation, &geo.grad[k], &Quat::zeros(), &mut grad);
    }
    Ok(ParamLoss {
        value: ph.loss + geo.value,
        appearance: ph.loss,
        geometric: geo.value,
        grad,
    })
}

/// Fits the joint of part `part_id` against end-state views plus Chamfer to
/// the deformation targets (one per movable Gaussian, in cloud order).
pub fn optimize_motion_params(
    cloud: &GaussianCloud,
    part_id: u32,
    targets: &[Vector3<f64>],
    views: &[View],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<MotionFit> {
    let start = Instant::now();
    let movable: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.gaussians[i].mask == part_id).collect();
    if movable.len() < cfg.min_movable {
        return Err(Error::DegenerateMask {
            count: movable.len(),
            required: cfg.min_movable,
        });
    }
    if targets.len() != movable.len() {
        return Err(Error::DimensionMismatch(format!("{} targets for {} movable", targets.len(), movable.len())));
    }
    if views.is_empty() {
        return Err(Error::EmptySet("end-state views"));
    }
    let rest: Vec<Vector3<f64>> = movable.iter().map(|&i| cloud.gaussians[i].position).collect();
    let mut params = revolute_init(&rest, targets)?;
    let initial = params.clone();
    let mut adam = AdamState::new(params.flat_len());
    let check_at = (cfg.type_check_fraction * cfg.motion_steps as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut record = StageRecord::new("motion", part_id);
    let mut trace = MotionTrace::default();
    let mut guard = DivergenceGuard::default();
    for it in 0..cfg.motion_steps {
        if it == check_at && detect_motion_type(&params, cfg.mask.pivot_radius) == MotionType::Prismatic {
            let mean = targets.iter().zip(&rest).map(|(q, p)| q - p).sum::<Vector3<f64>>() / rest.len() as f64;
            let distance = mean.norm();
            params = MotionParams::Prismatic {
                axis: if distance > 1e-12 { mean / distance } else { Vector3::x() },
                distance,
            };
            adam = AdamState::new(params.flat_len());
            trace.switched_at = Some(it);
        }
        let cam = rng.random_range(0..views.len());
        let pl = param_loss(cloud, part_id, &params, targets, &views[cam], cfg)?;
        guard.check("motion", it, cam, pl.value)?;
        let lr = exp_decay(cfg.lr.motion, cfg.lr.motion_final, it, cfg.motion_steps);
        let mut flat = params.to_flat();
        adam_step(&mut flat, &pl.grad, &mut adam, lr, "motion")?;
        params.set_flat(&flat);
        record.loss.push(pl.value);
        trace.appearance.push(pl.appearance);
        trace.geometric.push(pl.geometric);
    }
    let kind = params.kind();
    record.wall_seconds = start.elapsed().as_secs_f64();
    record.motion = Some(trace);
    Ok(MotionFit {
        params,
        kind,
        initial,
        record,
    })
}

/// New labels for sub-process `part_id`: moving Gaussians get `part_id`,
/// the rest keep any other part's label and otherwise become static.
pub(crate) fn relabel(previous: &[u32], dx: &[Vector3<f64>], tau: f64, part_id: u32) -> Result<Vec<u32>> {
    let fresh = classify_movable(dx, tau, part_id)?;
    Ok(fresh
        .into_iter()
        .zip(previous)
        .map(|(f, &p)| if f == part_id || p == part_id { f } else { p })
        .collect())
}

/// Jointly refines the cloud and the joint of `part_id` over both states
/// after reclassifying the mask from `field` at the lower threshold.
pub fn stage_joint(
    state: &mut PipelineState,
    views0: &[View],
    views1: &[View],
    part_id: u32,
    field: &DeformationField,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<()> {
    let start = Instant::now();
    let mut params = state
        .motions
        .get(&part_id)
        .cloned()
        .ok_or_else(|| Error::ContractViolation(format!("no motion for part {part_id}")))?;
    if field.len() != state.cloud.len() {
        return Err(Error::DimensionMismatch(format!(
            "field {} vs cloud {}",
            field.len(),
            state.cloud.len()
        )));
    }
    let labels = relabel(&state.cloud.masks(), &field.dx, cfg.mask.tau_joint, part_id)?;
    for (g, m) in state.cloud.gaussians.iter_mut().zip(labels) {
        g.mask = m;
    }
    let steps = cfg.joint_steps;
    let total_views = views0.len() + views1.len();
    if total_views == 0 {
        return Err(Error::EmptySet("joint-stage views"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = &mut state.cloud;
    let mut opt = CloudOptimizer::new(cloud);
    let mut stats = DensifyStats::new(cloud.len());
    let mut adam = AdamState::new(params.flat_len());
    let mut guard = DivergenceGuard::default();
    let mut record = StageRecord::new("joint", part_id);
    for it in 0..steps {
        let pick = rng.random_range(0..total_views);
        let (s, view) = if pick < views0.len() {
            (0u8, &views0[pick])
        } else {
            (1u8, &views1[pick - views0.len()])
        };
        let mut d_params = vec![0.0; params.flat_len()];
        let ph = if s == 0 {
            photometric(cloud, view, cfg)?
        } else {
            let joint = JointTransform::new(&params, 1.0)?;
            let posed = pose_raw(cloud, part_id, &joint);
            let mut ph = photometric(&posed, view, cfg)?;
            pull_back(cloud, part_id, &joint, &mut ph.grads, &mut d_params);
            ph
        };
        guard.check("joint", it, pick, ph.loss)?;
        stats.add(&ph.grads, view.camera.width);
        let lr_pos = exp_decay(cfg.lr.position, cfg.lr.position_final, it, steps);
        opt.step(cloud, &ph.grads, &cfg.lr, lr_pos)?;
        if s == 1 {
            let lr = exp_decay(cfg.lr.motion, cfg.lr.motion_final, it, steps);
            let mut flat = params.to_flat();
            adam_step(&mut flat, &d_params, &mut adam, lr, "motion")?;
            params.set_flat(&flat);
        }
        record.loss.push(ph.loss);
        record.state.push(s);
        if densify_due(it, steps, cfg) {
            let r = densify_and_prune(cloud, &stats, Some(&mut opt), &cfg.densify)?;
            record.densify.push(DensifyEvent::new(it, &r, cloud.len()));
            stats = DensifyStats::new(cloud.len());
        }
    }
    record.wall_seconds = start.elapsed().as_secs_f64();
    state.motions.insert(part_id, params);
    state.log.push(record);
    Ok(())
}

/// `cfg.sh_degree` coefficient count sanity for clouds entering a stage.
pub(crate) fn check_cloud(cloud: &GaussianCloud) -> Result<()> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("stage input"));
    }
    if cloud.sh_degree > sh::MAX_DEGREE {
        return Err(Error::Config(format!("cloud SH degree {}", cloud.sh_degree)));
    }
    Ok(())
}

pub(crate) fn snapshot(state: &PipelineState, stage: &str, part_id: u32, frame_state: usize) -> StageSnapshot {
    StageSnapshot {
        stage: stage.to_string(),
        part_id,
        frame_state,
        cloud: state.cloud.clone(),
        motion: state.motions.get(&part_id).cloned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn revolute_init_recovers_rigid_rotation() {
        let gt = MotionParams::Revolute {
            axis: Vector3::z(),
            pivot: Vector3::new(0.5, 0.0, 0.0),
            angle: 0.7,
        };
        let j = JointTransform::new(&gt, 1.0).unwrap();
        let pts: Vec<_> = (0..40)
            .map(|i| Vector3::new(-0.3 + 0.02 * i as f64, (i as f64 * 0.7).sin() * 0.03, (i as f64 * 0.3).cos() * 0.4))
            .collect();
        let tgt: Vec<_> = pts.iter().map(|p| j.apply_point(p)).collect();
        let init = revolute_init(&pts, &tgt).unwrap();
        let ji = JointTransform::new(&init, 1.0).unwrap();
        for (p, q) in pts.iter().zip(&tgt) {
            assert_relative_eq!(ji.apply_point(p), *q, epsilon = 1e-9);
        }
        assert!(detect_motion_type(&init, 1.0) == MotionType::Revolute);
    }

    #[test]
    fn revolute_init_of_translation_reads_prismatic() {
        let pts: Vec<_> = (0..30).map(|i| Vector3::new((i as f64).sin(), (i as f64 * 0.5).cos(), 0.1 * i as f64) * 0.3).collect();
        let tgt: Vec<_> = pts.iter().map(|p| p + Vector3::new(0.4, 0.0, 0.0)).collect();
        let init = revolute_init(&pts, &tgt).unwrap();
        assert_eq!(detect_motion_type(&init, 1.0), MotionType::Prismatic);
    }

    #[test]
    fn relabel_keeps_other_parts() {
        let dx = [Vector3::zeros(), Vector3::x(), Vector3::zeros(), Vector3::x() * 0.05];
        assert_eq!(relabel(&[0, 0, 1, 1], &dx, 0.1, 2).unwrap(), vec![0, 2, 1, 1]);
        assert_eq!(relabel(&[1, 1, 1, 0], &dx, 0.1, 1).unwrap(), vec![0, 1, 0, 0]);
    }

    #[test]
    fn divergence_guard() {
        let mut g = DivergenceGuard::default();
        g.check("t", 0, 0, 1.0).unwrap();
        for i in 0..199 {
            g.check("t", i + 1, 0, 11.0).unwrap();
        }
        assert!(matches!(g.check("t", 200, 0, 11.0), Err(Error::Divergence { .. })));
        assert!(matches!(g.check("t", 201, 3, f64::NAN), Err(Error::NonFiniteLoss { camera: 3, .. })));
    }
}
