//! Staged reconstruction: static fit, deformation, joint fitting and joint
//! refinement, plus the unstaged baseline and the multi-part loop.

mod config;
mod optimizer;
mod stages;
mod state;

pub use config::{DensifyConfig, LearningRates, PipelineConfig, SCHEMA_VERSION};
pub use optimizer::{densify_and_prune, CloudOptimizer, DensifyReport, DensifyStats};
pub use stages::{
    optimize_motion_params, param_loss, random_init, render_opts, revolute_init, stage_joint, train_static, DensifyEvent, MotionFit,
    MotionTrace, ParamLoss, StaticOutcome,
};
pub use state::{PipelineState, StageRecord, StageSnapshot};

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::{train_deform, DeformNet};
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::motion::{classify_movable, transform_cloud_unchecked, JointTransform, MotionParams, MotionType};
use crate::optim::{adam_step, exp_decay, AdamState};
use crate::view::View;
use stages::{check_cloud, densify_due, photometric, pose_raw, pull_back, relabel, snapshot, DivergenceGuard};

/// Which driver a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Single,
    Vanilla,
    Multi,
}

/// Dispatches to the driver for `mode`. `states` holds the views of each
/// joint state; single and vanilla runs use the first two.
pub fn run(
    mode: RunMode,
    states: &[Vec<View>],
    cfg: &PipelineConfig,
    known: Option<MotionType>,
    hook: Option<StageHook<'_>>,
) -> Result<PipelineState> {
    if states.len() < 2 {
        return Err(Error::Config(format!("need at least 2 states, got {}", states.len())));
    }
    let mut state = match mode {
        RunMode::Single => run_single_with(&states[0], &states[1], cfg, hook),
        RunMode::Multi => run_multi_part_with(states, cfg, hook),
        RunMode::Vanilla => {
            let known = known.ok_or_else(|| Error::Config("vanilla runs need a known joint type".into()))?;
            run_vanilla(&states[0], &states[1], cfg, known)
        }
    }?;
    for m in state.motions.values_mut() {
        *m = m.normalized();
    }
    Ok(state)
}

/// Observer called with the state after every stage boundary.
pub type StageHook<'a> = &'a mut dyn FnMut(&PipelineState, &str);

fn stage_seed(seed: u64, part_id: u32, stage: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((part_id as u64) << 8)
        .wrapping_add(stage)
}

/// Stages (b) to (d) for part `part_id`, starting from `state.cloud` posed in
/// the start state of this pair.
fn model_part(
    state: &mut PipelineState,
    views0: &[View],
    views1: &[View],
    part_id: u32,
    frame_state: usize,
    cfg: &PipelineConfig,
    hook: &mut Option<StageHook<'_>>,
) -> Result<()> {
    check_cloud(&state.cloud)?;
    if state.motions.contains_key(&part_id) {
        return Err(Error::ContractViolation(format!("part id {part_id} already modeled")));
    }
    let seed = state.seed;
    let start = Instant::now();
    let net = DeformNet::new(cfg.deform.arch.clone(), stage_seed(seed, part_id, 1)).map_err(|e| e.in_stage("deform"))?;
    let deform = train_deform(
        &state.cloud,
        views1,
        net,
        &cfg.deform,
        &cfg.loss,
        &render_opts(cfg),
        stage_seed(seed, part_id, 2),
    )
    .map_err(|e| e.in_stage("deform"))?;
    let mut rec = StageRecord::new("deform", part_id);
    rec.loss = deform.trace.total.clone();
    rec.deform = Some(deform.trace);
    rec.wall_seconds = start.elapsed().as_secs_f64();
    state.log.push(rec);
    state.nets.insert(part_id, deform.net);
    notify(hook, state, "deform");

    let field = deform.field;
    let labels = relabel(&state.cloud.masks(), &field.dx, cfg.mask.tau, part_id).map_err(|e| e.in_stage("classify"))?;
    for (g, m) in state.cloud.gaussians.iter_mut().zip(labels) {
        g.mask = m;
    }
    let targets: Vec<Vector3<f64>> = state
        .cloud
        .gaussians
        .iter()
        .zip(&field.dx)
        .filter(|(g, _)| g.mask == part_id)
        .map(|(g, d)| g.position + d)
        .collect();
    let fit = optimize_motion_params(&state.cloud, part_id, &targets, views1, cfg, stage_seed(seed, part_id, 3))
        .map_err(|e| e.in_stage("motion"))?;
    state.motions.insert(part_id, fit.params);
    state.log.push(fit.record);
    state.snapshots.push(snapshot(state, "motion", part_id, frame_state));
    notify(hook, state, "motion");

    stage_joint(state, views0, views1, part_id, &field, cfg, stage_seed(seed, part_id, 4)).map_err(|e| e.in_stage("joint"))?;
    state.snapshots.push(snapshot(state, "joint", part_id, frame_state));
    notify(hook, state, "joint");
    Ok(())
}

fn notify(hook: &mut Option<StageHook<'_>>, state: &PipelineState, stage: &str) {
    if let Some(h) = hook.as_mut() {
        h(state, stage);
    }
}

/// The full staged pipeline on one pair of states.
pub fn run_single(views0: &[View], views1: &[View], cfg: &PipelineConfig) -> Result<PipelineState> {
    run_single_with(views0, views1, cfg, None)
}

pub fn run_single_with(
    views0: &[View],
    views1: &[View],
    cfg: &PipelineConfig,
    mut hook: Option<StageHook<'_>>,
) -> Result<PipelineState> {
    cfg.validate()?;
    let stat = train_static(views0, cfg, stage_seed(cfg.seed, 0, 0)).map_err(|e| e.in_stage("static"))?;
    let mut state = PipelineState::new(stat.cloud, cfg.seed);
    state.log.push(stat.record);
    state.snapshots.push(snapshot(&state, "static", 0, 0));
    notify(&mut hook, &state, "static");
    model_part(&mut state, views0, views1, 1, 0, cfg, &mut hook)?;
    Ok(state)
}

/// Moves every modeled part by its joint at `t` (negative `t` undoes it).
fn pose_parts(cloud: &GaussianCloud, motions: &std::collections::BTreeMap<u32, MotionParams>, t: f64) -> Result<GaussianCloud> {
    let mut out = cloud.clone();
    for (&id, m) in motions {
        out = transform_cloud_unchecked(&out, id, m, t)?;
    }
    Ok(out)
}

/// The staged pipeline over consecutive state pairs, one new part per pair.
pub fn run_multi_part(states: &[Vec<View>], cfg: &PipelineConfig) -> Result<PipelineState> {
    run_multi_part_with(states, cfg, None)
}

pub fn run_multi_part_with(states: &[Vec<View>], cfg: &PipelineConfig, mut hook: Option<StageHook<'_>>) -> Result<PipelineState> {
    if states.len() < 2 {
        return Err(Error::Config(format!("need at least 2 states, got {}", states.len())));
    }
    cfg.validate()?;
    let stat = train_static(&states[0], cfg, stage_seed(cfg.seed, 0, 0)).map_err(|e| e.in_stage("static"))?;
    let mut state = PipelineState::new(stat.cloud, cfg.seed);
    state.log.push(stat.record);
    state.snapshots.push(snapshot(&state, "static", 0, 0));
    notify(&mut hook, &state, "static");
    for k in 1..states.len() {
        let part_id = k as u32;
        if k > 1 {
            // Bring the previous part to this pair's start state.
            let prev = (k - 1) as u32;
            let m = state.motions[&prev].clone();
            state.cloud = transform_cloud_unchecked(&state.cloud, prev, &m, 1.0)?;
            state.snapshots.push(snapshot(&state, "posed", part_id, k - 1));
        }
        model_part(&mut state, &states[k - 1], &states[k], part_id, k - 1, cfg, &mut hook)?;
    }
    // Undo the posing of all but the last part so the cloud sits in state 0.
    let mut earlier = state.motions.clone();
    earlier.remove(&((states.len() - 1) as u32));
    state.cloud = pose_parts(&state.cloud, &earlier, -1.0)?;
    Ok(state)
}

/// Unstaged baseline: two random sets optimized together with a joint of
/// known type against both states from the first step.
pub fn run_vanilla(views0: &[View], views1: &[View], cfg: &PipelineConfig, known: MotionType) -> Result<PipelineState> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, 0, 9));
    let half = (cfg.init_points / 2).max(1);
    let mut cloud = stages::random_init(half, cfg.sh_degree, cfg.init_opacity, 0, &mut rng);
    let movable = stages::random_init(cfg.init_points - half, cfg.sh_degree, cfg.init_opacity, 1, &mut rng);
    cloud.gaussians.extend(movable.gaussians);
    let dir = loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() <= 1.0 {
            break v.normalize();
        }
    };
    let mut params = match known {
        MotionType::Revolute => MotionParams::Revolute {
            axis: dir,
            pivot: Vector3::zeros(),
            angle: 0.0,
        },
        MotionType::Prismatic => MotionParams::Prismatic { axis: dir, distance: 0.0 },
    };
    let steps = cfg.static_steps + cfg.deform.steps + cfg.motion_steps + cfg.joint_steps;
    let total_views = views0.len() + views1.len();
    if views0.is_empty() || views1.is_empty() {
        return Err(Error::EmptySet("vanilla views"));
    }
    let mut opt = CloudOptimizer::new(&cloud);
    let mut stats = DensifyStats::new(cloud.len());
    let mut adam = AdamState::new(params.flat_len());
    let mut guard = DivergenceGuard::default();
    let mut record = StageRecord::new("vanilla", 1);
    for it in 0..steps {
        let pick = rng.random_range(0..total_views);
        let (s, view) = if pick < views0.len() {
            (0u8, &views0[pick])
        } else {
            (1u8, &views1[pick - views0.len()])
        };
        let mut d_params = vec![0.0; params.flat_len()];
        let ph = if s == 0 {
            photometric(&cloud, view, cfg)
        } else {
            let joint = JointTransform::new(&params, 1.0)?;
            let posed = pose_raw(&cloud, 1, &joint);
            photometric(&posed, view, cfg).map(|mut ph| {
                pull_back(&cloud, 1, &joint, &mut ph.grads, &mut d_params);
                ph
            })
        }
        .map_err(|e| e.in_stage("vanilla"))?;
        guard.check("vanilla", it, pick, ph.loss).map_err(|e| e.in_stage("vanilla"))?;
        stats.add(&ph.grads, view.camera.width);
        let lr_pos = exp_decay(cfg.lr.position, cfg.lr.position_final, it, steps);
        opt.step(&mut cloud, &ph.grads, &cfg.lr, lr_pos)?;
        if s == 1 {
            let lr = exp_decay(cfg.lr.motion, cfg.lr.motion_final, it, steps);
            let mut flat = params.to_flat();
            adam_step(&mut flat, &d_params, &mut adam, lr, "motion")?;
            params.set_flat(&flat);
        }
        record.loss.push(ph.loss);
        record.state.push(s);
        if densify_due(it, steps, cfg) {
            let r = densify_and_prune(&mut cloud, &stats, Some(&mut opt), &cfg.densify).map_err(|e| e.in_stage("vanilla"))?;
            record.densify.push(DensifyEvent {
                step: it,
                cloned: r.cloned,
                split: r.split,
                pruned: r.pruned,
                count: cloud.len(),
            });
            stats = DensifyStats::new(cloud.len());
        }
    }
    record.wall_seconds = start.elapsed().as_secs_f64();
    let movable = cloud.gaussians.iter().filter(|g| g.mask == 1).count();
    let mut state = PipelineState::new(cloud, cfg.seed);
    state.mask_collapse = movable == 0 || movable == state.cloud.len();
    state.motions.insert(1, params);
    state.log.push(record);
    Ok(state)
}

/// Labels from a field at threshold `tau`, exposed for inspection tools.
pub fn classify_field(dx: &[Vector3<f64>], tau: f64, part_id: u32) -> Result<Vec<u32>> {
    classify_movable(dx, tau, part_id)
}
