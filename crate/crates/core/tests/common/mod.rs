#![allow(dead_code)]

use artgs_core::pipeline::PipelineConfig;
use artgs_core::synth::{fibonacci_cameras, make_scene, pose_scene, render_views, CameraRig, GroundTruth, SceneSpec, Template};
use artgs_core::{GaussianCloud, View};

pub struct Scene {
    pub cloud: GaussianCloud,
    pub gt: GroundTruth,
    pub train: Vec<Vec<View>>,
    pub holdout: Vec<Vec<View>>,
}

pub fn scene(template: Template, seed: u64, per_part: usize, views: usize, holdout: usize, res: usize) -> Scene {
    let mut spec = SceneSpec::template(template);
    spec.gaussians_per_part = per_part;
    let (cloud, gt) = make_scene(&spec, seed).unwrap();
    let rig = CameraRig::default();
    let cams = fibonacci_cameras(views, res, &rig);
    let held = fibonacci_cameras(holdout, res, &CameraRig { phase: 1.0, ..rig });
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for s in 0..gt.states.len() {
        let posed = pose_scene(&cloud, &gt, s).unwrap();
        train.push(render_views(&posed, &cams));
        hold.push(render_views(&posed, &held));
    }
    Scene {
        cloud,
        gt,
        train,
        holdout: hold,
    }
}

/// A budget small enough for smoke and replay tests.
pub fn tiny_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed,
        init_points: 300,
        static_steps: 80,
        motion_steps: 40,
        joint_steps: 40,
        ..Default::default()
    };
    cfg.deform.steps = 40;
    cfg.deform.arap_sample = 200;
    cfg.densify.start = 20;
    cfg.densify.interval = 20;
    cfg.densify.max_gaussians = 600;
    cfg.min_movable = 1;
    cfg
}
