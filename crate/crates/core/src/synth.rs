//! Synthetic articulated scenes with exact ground truth.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud};
use crate::motion::{transform_cloud, MotionParams};
use crate::render::{rasterize, RenderOptions};
use crate::view::View;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    Door,
    Drawer,
    Laptop,
    TwoDrawer,
}

impl std::str::FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "door" => Ok(Template::Door),
            "drawer" => Ok(Template::Drawer),
            "laptop" => Ok(Template::Laptop),
            "two-drawer" => Ok(Template::TwoDrawer),
            other => Err(Error::Config(format!("unknown template `{other}`"))),
        }
    }
}

/// Axis-aligned box part with a base color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub template: Template,
    /// Part 0 is the static base; part `k` moves with `motions[k - 1]`.
    pub parts: Vec<PartSpec>,
    pub motions: Vec<MotionParams>,
    /// `states[s][k - 1]` is the interpolation of part `k` in state `s`.
    pub states: Vec<Vec<f64>>,
    pub gaussians_per_part: usize,
    pub normalize: bool,
    pub sh_degree: usize,
}

fn part(min: [f64; 3], max: [f64; 3], color: [f64; 3]) -> PartSpec {
    PartSpec { min, max, color }
}

impl SceneSpec {
    pub fn template(template: Template) -> Self {
        let (parts, motions, states) = match template {
            Template::Door => (
                vec![
                    part([0.52, -0.1, -0.45], [0.8, 0.3, 0.45], [0.3, 0.38, 0.65]),
                    part([-0.35, -0.03, -0.4], [0.48, 0.03, 0.4], [0.85, 0.5, 0.2]),
                ],
                vec![MotionParams::Revolute {
                    axis: Vector3::z(),
                    pivot: Vector3::new(0.5, 0.0, 0.0),
                    angle: 40f64.to_radians(),
                }],
                vec![vec![0.0], vec![1.0]],
            ),
            Template::Drawer => (
                vec![
                    part([-0.55, -0.35, -0.45], [0.05, 0.35, -0.02], [0.35, 0.6, 0.35]),
                    part([-0.45, -0.25, 0.02], [-0.05, 0.25, 0.3], [0.8, 0.3, 0.3]),
                ],
                vec![MotionParams::Prismatic {
                    axis: Vector3::x(),
                    distance: 0.4,
                }],
                vec![vec![0.0], vec![1.0]],
            ),
            Template::Laptop => (
                vec![
                    part([-0.38, -0.3, -0.06], [0.4, 0.3, 0.0], [0.45, 0.45, 0.5]),
                    part([-0.46, -0.3, 0.03], [-0.41, 0.3, 0.5], [0.2, 0.3, 0.7]),
                ],
                vec![MotionParams::Revolute {
                    axis: Vector3::y(),
                    pivot: Vector3::new(-0.42, 0.0, 0.0),
                    angle: 50f64.to_radians(),
                }],
                vec![vec![0.0], vec![1.0]],
            ),
            Template::TwoDrawer => (
                vec![
                    part([-0.55, -0.45, -0.5], [0.05, 0.45, -0.05], [0.35, 0.55, 0.4]),
                    part([-0.45, -0.42, -0.02], [-0.05, -0.05, 0.25], [0.8, 0.3, 0.3]),
                    part([-0.45, 0.05, -0.02], [-0.05, 0.42, 0.25], [0.3, 0.35, 0.8]),
                ],
                vec![
                    MotionParams::Prismatic {
                        axis: Vector3::x(),
                        distance: 0.4,
                    },
                    MotionParams::Prismatic {
                        axis: Vector3::x(),
                        distance: 0.3,
                    },
                ],
                vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]],
            ),
        };
        Self {
            template,
            parts,
            motions,
            states,
            gaussians_per_part: 500,
            normalize: true,
            sh_degree: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.len() < 2 || self.motions.len() + 1 != self.parts.len() {
            return Err(Error::Config("scene needs a base plus one motion per movable part".into()));
        }
        if self.states.is_empty() || self.states.iter().any(|s| s.len() != self.motions.len()) {
            return Err(Error::Config("every state needs one interpolation value per movable part".into()));
        }
        if self.states.iter().flatten().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("state interpolation values must lie in [0, 1]".into()));
        }
        if self.gaussians_per_part == 0 {
            return Err(Error::Config("gaussians_per_part must be positive".into()));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if (0..3).any(|k| !(p.max[k] > p.min[k])) {
                return Err(Error::Config(format!("part {i} has an empty box")));
            }
        }
        for i in 0..self.parts.len() {
            for j in i + 1..self.parts.len() {
                let (a, b) = (&self.parts[i], &self.parts[j]);
                if (0..3).all(|k| a.min[k] < b.max[k] && b.min[k] < a.max[k]) {
                    return Err(Error::Config(format!("parts {i} and {j} overlap at rest")));
                }
            }
        }
        Ok(())
    }
}

/// Exact labels, joints and posed samples of a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: Vec<u32>,
    pub motions: BTreeMap<u32, MotionParams>,
    pub states: Vec<Vec<f64>>,
    /// Gaussian centers posed in each state.
    pub points: Vec<Vec<Vector3<f64>>>,
}

impl GroundTruth {
    pub fn part_ids(&self) -> Vec<u32> {
        self.motions.keys().copied().collect()
    }

    /// Centers of part `id` in state `s` (`None` for every part).
    pub fn part_points(&self, s: usize, id: Option<u32>) -> Vec<Vector3<f64>> {
        self.points[s]
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| id.is_none_or(|id| l == id))
            .map(|(p, _)| *p)
            .collect()
    }
}

const FACE_SHADE: [f64; 6] = [1.0, 0.82, 0.92, 0.74, 0.97, 0.86];
const CHECKER: f64 = 0.12;

fn sample_box_surface(p: &PartSpec, n: usize, rng: &mut ChaCha8Rng) -> (Vec<(Vector3<f64>, [f64; 3])>, f64) {
    let lo = Vector3::from(p.min);
    let ext = Vector3::from(p.max) - lo;
    let areas = [ext.y * ext.z, ext.y * ext.z, ext.x * ext.z, ext.x * ext.z, ext.x * ext.y, ext.x * ext.y];
    let total: f64 = areas.iter().sum();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.random_range(0.0..total);
        let mut face = 5;
        for (f, a) in areas.iter().enumerate() {
            if pick < *a {
                face = f;
                break;
            }
            pick -= a;
        }
        let mut u = Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        u[face / 2] = (face % 2) as f64;
        let x = lo + ext.component_mul(&u);
        let cell: i64 = (0..3).map(|k| ((x[k] - lo[k]) / CHECKER).floor() as i64).sum();
        let tone = if cell.rem_euclid(2) == 0 { 1.0 } else { 0.7 };
        let shade = FACE_SHADE[face] * tone;
        out.push((x, p.color.map(|c| (c * shade).clamp(0.0, 1.0))));
    }
    (out, (total / n as f64).sqrt())
}

/// Builds the scene cloud (state-0 pose) and its ground truth.
pub fn make_scene(spec: &SceneSpec, seed: u64) -> Result<(GaussianCloud, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::new(spec.sh_degree);
    let mut motions: BTreeMap<u32, MotionParams> = spec
        .motions
        .iter()
        .enumerate()
        .map(|(k, m)| (k as u32 + 1, m.clone()))
        .collect();
    for (id, p) in spec.parts.iter().enumerate() {
        let (samples, spacing) = sample_box_surface(p, spec.gaussians_per_part, &mut rng);
        for (x, rgb) in samples {
            let mut g = Gaussian::isotropic(x, 0.6 * spacing, 0.95, rgb);
            g.mask = id as u32;
            cloud.gaussians.push(g);
        }
    }
    if spec.normalize {
        let mut radius: f64 = 0.0;
        for s in 0..spec.states.len() {
            let posed = pose_with(&cloud, &motions, &spec.states[s])?;
            for g in &posed.gaussians {
                radius = radius.max(g.position.norm());
            }
        }
        if radius > 1.0 {
            let k = 1.0 / radius;
            for g in &mut cloud.gaussians {
                g.position *= k;
                g.log_scale.add_scalar_mut(k.ln());
            }
            for m in motions.values_mut() {
                match m {
                    MotionParams::Revolute { pivot, .. } => *pivot *= k,
                    MotionParams::Prismatic { distance, .. } => *distance *= k,
                }
            }
        }
    }
    let mut points = Vec::with_capacity(spec.states.len());
    for s in &spec.states {
        points.push(pose_with(&cloud, &motions, s)?.positions());
    }
    let gt = GroundTruth {
        labels: cloud.masks(),
        motions,
        states: spec.states.clone(),
        points,
    };
    Ok((cloud, gt))
}

fn pose_with(cloud: &GaussianCloud, motions: &BTreeMap<u32, MotionParams>, ts: &[f64]) -> Result<GaussianCloud> {
    let mut out = cloud.clone();
    for ((id, m), &t) in motions.iter().zip(ts) {
        if t != 0.0 {
            out = transform_cloud(&out, *id, m, t)?;
        }
    }
    Ok(out)
}

/// The scene cloud with every part moved to state `state`.
pub fn pose_scene(cloud: &GaussianCloud, gt: &GroundTruth, state: usize) -> Result<GaussianCloud> {
    let ts = gt
        .states
        .get(state)
        .ok_or_else(|| Error::Config(format!("state {state} out of range ({} states)", gt.states.len())))?;
    pose_with(cloud, &gt.motions, ts)
}

/// Camera placement for synthetic datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRig {
    pub radius: f64,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    /// Azimuth offset of the Fibonacci lattice in radians.
    pub phase: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            radius: 2.5,
            focal_factor: 1.0,
            phase: 0.0,
        }
    }
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// `n` cameras on a Fibonacci sphere looking at the origin with +z up.
pub fn fibonacci_cameras(n: usize, resolution: usize, rig: &CameraRig) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * GOLDEN_ANGLE + rig.phase;
            let eye = Vector3::new(r * phi.cos(), r * phi.sin(), z) * rig.radius;
            Camera::look_at(eye, Vector3::zeros(), Vector3::z(), resolution, resolution, rig.focal_factor * resolution as f64)
        })
        .collect()
}

/// Renders `cloud` from `n_views` rig cameras on a white background.
pub fn render_dataset(cloud: &GaussianCloud, n_views: usize, resolution: usize, rig: &CameraRig) -> Result<Vec<View>> {
    if n_views < 8 {
        return Err(Error::Config(format!("need at least 8 views, got {n_views}")));
    }
    Ok(render_views(cloud, &fibonacci_cameras(n_views, resolution, rig)))
}

pub fn render_views(cloud: &GaussianCloud, cameras: &[Camera]) -> Vec<View> {
    let opts = RenderOptions::default();
    cameras
        .iter()
        .map(|c| View {
            camera: c.clone(),
            image: rasterize(cloud, c, &opts).image,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::chamfer_distance;
    use approx::assert_relative_eq;

    #[test]
    fn door_counts_and_determinism() {
        let spec = SceneSpec::template(Template::Door);
        let (a, gt) = make_scene(&spec, 1).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(gt.labels.iter().filter(|&&l| l == 0).count(), 500);
        assert_eq!(gt.labels.iter().filter(|&&l| l == 1).count(), 500);
        let (b, _) = make_scene(&spec, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn templates_fit_unit_sphere() {
        for t in [Template::Door, Template::Drawer, Template::Laptop, Template::TwoDrawer] {
            let (cloud, gt) = make_scene(&SceneSpec::template(t), 2).unwrap();
            for s in 0..gt.states.len() {
                let posed = pose_scene(&cloud, &gt, s).unwrap();
                assert!(posed.gaussians.iter().all(|g| g.position.norm() <= 1.0), "{t:?} state {s}");
            }
        }
    }

    #[test]
    fn normalization_rescales_joints() {
        let mut spec = SceneSpec::template(Template::Drawer);
        for p in &mut spec.parts {
            p.min = p.min.map(|v| v * 3.0);
            p.max = p.max.map(|v| v * 3.0);
        }
        spec.motions[0] = MotionParams::Prismatic {
            axis: Vector3::x(),
            distance: 1.2,
        };
        let (cloud, gt) = make_scene(&spec, 3).unwrap();
        let posed = pose_scene(&cloud, &gt, 1).unwrap();
        assert!(posed.gaussians.iter().all(|g| g.position.norm() <= 1.0));
        assert!(gt.motions[&1].magnitude() < 1.2);
    }

    #[test]
    fn overlapping_parts_rejected() {
        let mut spec = SceneSpec::template(Template::Door);
        spec.parts[1].max[0] = 0.6;
        assert!(make_scene(&spec, 0).is_err());
    }

    #[test]
    fn posing() {
        let (cloud, gt) = make_scene(&SceneSpec::template(Template::Door), 4).unwrap();
        assert_eq!(pose_scene(&cloud, &gt, 0).unwrap(), cloud);
        let posed = pose_scene(&cloud, &gt, 1).unwrap();
        let pivot = Vector3::new(0.5, 0.0, 0.0);
        for (a, b) in cloud.gaussians.iter().zip(&posed.gaussians) {
            if a.mask == 0 {
                assert_eq!(a.position, b.position);
            } else {
                let (u, v) = (a.position - pivot, b.position - pivot);
                assert_relative_eq!(u.z, v.z, epsilon = 1e-12);
                let ang = v.y.atan2(v.x) - u.y.atan2(u.x);
                let ang = (ang + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
                assert_relative_eq!(ang.to_degrees(), 40.0, epsilon = 1e-9);
            }
        }
        let mut spec = SceneSpec::template(Template::Drawer);
        spec.states = vec![vec![0.0], vec![0.5]];
        let (cloud, gt) = make_scene(&spec, 5).unwrap();
        let half = pose_scene(&cloud, &gt, 1).unwrap();
        for (a, b) in cloud.gaussians.iter().zip(&half.gaussians) {
            let expect = if a.mask == 1 { Vector3::new(0.2, 0.0, 0.0) } else { Vector3::zeros() };
            assert_relative_eq!(b.position - a.position, expect, epsilon = 1e-12);
        }
        assert!(pose_scene(&cloud, &gt, 2).is_err());
    }

    #[test]
    fn moving_parts_have_positive_chamfer() {
        for t in [Template::Door, Template::Drawer, Template::Laptop, Template::TwoDrawer] {
            let (_, gt) = make_scene(&SceneSpec::template(t), 6).unwrap();
            for id in gt.part_ids() {
                let a = gt.part_points(0, Some(id));
                let b = gt.part_points(gt.states.len() - 1, Some(id));
                assert!(chamfer_distance(&a, &b).unwrap().value > 0.0);
            }
        }
    }

    #[test]
    fn dataset_rendering() {
        let (cloud, _) = make_scene(&SceneSpec::template(Template::Door), 7).unwrap();
        let views = render_dataset(&cloud, 20, 16, &CameraRig::default()).unwrap();
        assert_eq!(views.len(), 20);
        let again = render_dataset(&cloud, 20, 16, &CameraRig::default()).unwrap();
        assert_eq!(views, again);
        let empty = GaussianCloud::new(1);
        let blank = render_dataset(&empty, 8, 16, &CameraRig::default()).unwrap();
        assert!(blank.iter().all(|v| v.image.data.iter().all(|&p| p == 1.0)));
        assert!(render_dataset(&cloud, 7, 16, &CameraRig::default()).is_err());
        for v in &views {
            v.camera.validate().unwrap();
            assert_relative_eq!(v.camera.center().norm(), 2.5, epsilon = 1e-12);
        }
    }
}
