use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use artgs_core::io::{read_dataset, read_ply, write_dataset, write_ply, write_ppm, Dataset, RunManifest, StateData};
use artgs_core::metrics::evaluate;
use artgs_core::motion::{transform_cloud, MotionType};
use artgs_core::pipeline::{render_opts, run, PipelineConfig, PipelineState, RunMode};
use artgs_core::render::rasterize;
use artgs_core::synth::{fibonacci_cameras, make_scene, pose_scene, render_views, CameraRig, SceneSpec, Template};
use artgs_core::{Error, GaussianCloud};

#[derive(Parser)]
#[command(name = "artgs", version, about = "Articulated object reconstruction with Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic articulated scene into a dataset directory.
    Synth(SynthArgs),
    /// Run the staged pipeline on a two-state dataset.
    Train(TrainArgs),
    /// Run the unstaged baseline with a known joint type.
    TrainVanilla {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long = "type", value_parser = parse_type)]
        kind: MotionType,
    },
    /// Run the staged pipeline over three or more states, one part per pair.
    TrainMulti(TrainArgs),
    /// Compare a trained run against the dataset's ground truth.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Dataset directory; defaults to the one recorded in the manifest.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render frames sweeping a joint from t = 0 to t = 1.
    RenderSequence {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        part: u32,
        #[arg(long, default_value_t = 128)]
        res: usize,
        /// Index of the rig camera to render from.
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long, default_value_t = 8)]
        views: usize,
    },
    /// Write the trained cloud, optionally posed, as PLY.
    ExportPly {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Joint interpolation applied to every part.
        #[arg(long, default_value_t = 0.0)]
        t: f64,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_template)]
    template: Template,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    views: usize,
    #[arg(long, default_value_t = 4)]
    holdout: usize,
    #[arg(long, default_value_t = 64)]
    res: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    gaussians_per_part: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON pipeline config; omitted keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_template(s: &str) -> Result<Template, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_type(s: &str) -> Result<MotionType, String> {
    match s {
        "revolute" => Ok(MotionType::Revolute),
        "prismatic" => Ok(MotionType::Prismatic),
        other => Err(format!("unknown joint type `{other}` (revolute or prismatic)")),
    }
}

/// Removes everything written under an output path unless committed.
struct Outputs {
    root: PathBuf,
    created_root: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn dir(root: &Path) -> anyhow::Result<Self> {
        let created_root = !root.exists();
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            created_root,
            files: Vec::new(),
            committed: false,
        })
    }

    fn file(path: &Path) -> Self {
        Self {
            root: path.to_path_buf(),
            created_root: false,
            files: vec![path.to_path_buf()],
            committed: false,
        }
    }

    fn track(&mut self, path: PathBuf) -> PathBuf {
        if !self.files.contains(&path) {
            self.files.push(path.clone());
        }
        path
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if self.created_root && self.root.is_dir() {
            let _ = std::fs::remove_dir_all(&self.root);
            return;
        }
        for f in self.files.iter().rev() {
            if f.is_dir() {
                let _ = std::fs::remove_dir(f);
            } else {
                let _ = std::fs::remove_file(f);
            }
        }
    }
}

fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let mut spec = SceneSpec::template(a.template);
    if let Some(n) = a.gaussians_per_part {
        spec.gaussians_per_part = n;
    }
    let (cloud, gt) = make_scene(&spec, a.seed)?;
    let rig = CameraRig::default();
    let cams = fibonacci_cameras(a.views, a.res, &rig);
    let held = fibonacci_cameras(
        a.holdout,
        a.res,
        &CameraRig {
            phase: 1.0,
            ..rig.clone()
        },
    );
    let mut states = Vec::new();
    for s in 0..gt.states.len() {
        let posed = pose_scene(&cloud, &gt, s)?;
        states.push(StateData {
            views: render_views(&posed, &cams),
            holdout: render_views(&posed, &held),
        });
    }
    let mut out = Outputs::dir(&a.out)?;
    write_dataset(&a.out, &Dataset { states, gt: Some(gt) })?;
    out.committed = true;
    log::info!("wrote {} states to {}", spec.states.len(), a.out.display());
    Ok(())
}

fn load_config(a: &TrainArgs) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::from_json(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_file(stage: &str, part: u32) -> String {
    format!("{stage}_{part}")
}

fn train(a: &TrainArgs, mode: RunMode, known: Option<MotionType>) -> anyhow::Result<()> {
    let cfg = load_config(a)?;
    let data = read_dataset(&a.data)?;
    let states = data.training_views();
    match mode {
        RunMode::Multi if states.len() < 3 => bail!(Error::Config(format!("train-multi needs at least 3 states, dataset has {}", states.len()))),
        _ if states.len() < 2 => bail!(Error::Config(format!("dataset has {} states, need 2", states.len()))),
        _ => {}
    }
    let dataset = a.data.display().to_string();
    let mut out = Outputs::dir(&a.out)?;
    let ckpt_dir = a.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    out.track(ckpt_dir.clone());

    let mut artifacts: BTreeMap<String, String> = BTreeMap::new();
    let mut hook_err: Option<anyhow::Error> = None;
    let manifest_path = a.out.join("manifest.json");
    let mut written: Vec<PathBuf> = Vec::new();
    let mut hook = |state: &PipelineState, stage: &str| {
        if hook_err.is_some() {
            return;
        }
        let part = state.log.last().map_or(0, |r| r.part_id);
        let name = stage_file(stage, part);
        let ply = ckpt_dir.join(format!("{name}.ply"));
        let res = (|| -> anyhow::Result<()> {
            write_ply(&state.cloud, &ply)?;
            written.push(ply.clone());
            artifacts.insert(format!("checkpoint_{name}"), format!("checkpoints/{name}.ply"));
            let mut m = RunManifest::from_state(state, mode, known, &dataset, &cfg, false);
            m.artifacts = artifacts.clone();
            m.save(&manifest_path)?;
            Ok(())
        })();
        match res {
            Ok(()) => log::info!("stage {stage} (part {part}) done, {} gaussians", state.cloud.len()),
            Err(e) => hook_err = Some(e),
        }
    };
    let result = run(mode, &states, &cfg, known, Some(&mut hook));
    for f in written {
        out.track(f);
    }
    out.track(manifest_path.clone());
    if let Some(e) = hook_err {
        return Err(e.context("writing checkpoint"));
    }
    let state = result?;
    let cloud_path = out.track(a.out.join("cloud.ply"));
    write_ply(&state.cloud, &cloud_path)?;
    artifacts.insert("cloud".into(), "cloud.ply".into());
    let mut m = RunManifest::from_state(&state, mode, known, &dataset, &cfg, true);
    m.artifacts = artifacts;
    m.save(&manifest_path)?;
    for (id, p) in &state.motions {
        log::info!("part {id}: {p:?}");
    }
    out.committed = true;
    Ok(())
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_run(manifest: &Path) -> anyhow::Result<(RunManifest, GaussianCloud)> {
    let m = RunManifest::load(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    if !m.complete {
        bail!(Error::ContractViolation(format!("{} is a checkpoint of an unfinished run", manifest.display())));
    }
    let rel = m
        .artifacts
        .get("cloud")
        .ok_or_else(|| Error::ContractViolation("manifest lists no cloud artifact".into()))?;
    let cloud = read_ply(&manifest_dir(manifest).join(rel))?;
    Ok((m, cloud))
}

fn eval(manifest: &Path, data: Option<&Path>) -> anyhow::Result<()> {
    let (mut m, cloud) = load_run(manifest)?;
    let dir = data.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&m.dataset));
    let ds = read_dataset(&dir)?;
    let gt = ds
        .gt
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} has no gt.json", dir.display())))?;
    let holdout: Vec<_> = ds
        .states
        .iter()
        .map(|s| if s.holdout.is_empty() { s.views.clone() } else { s.holdout.clone() })
        .collect();
    let report = evaluate(&cloud, &m.motions, gt, &holdout, &render_opts(&m.config))?;
    let text = serde_json::to_string_pretty(&report)?;
    let report_path = manifest_dir(manifest).join("report.json");
    let mut out = Outputs::file(&report_path);
    std::fs::write(&report_path, &text)?;
    m.artifacts.insert("report".into(), "report.json".into());
    m.report = Some(report);
    m.save(manifest)?;
    out.committed = true;
    println!("{text}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn render_sequence(manifest: &Path, out_dir: &Path, frames: usize, part: u32, res: usize, view: usize, views: usize) -> anyhow::Result<()> {
    if frames < 2 {
        bail!(Error::Config(format!("need at least 2 frames, got {frames}")));
    }
    if view >= views {
        bail!(Error::Config(format!("view {view} out of range ({views} views)")));
    }
    let (m, cloud) = load_run(manifest)?;
    let params = m
        .motions
        .get(&part)
        .ok_or_else(|| Error::Config(format!("no joint for part {part}")))?;
    let cam = fibonacci_cameras(views, res, &CameraRig::default()).swap_remove(view);
    let opts = render_opts(&m.config);
    let mut out = Outputs::dir(out_dir)?;
    let mut index = Vec::new();
    for i in 0..frames {
        let t = i as f64 / (frames - 1) as f64;
        let posed = transform_cloud(&cloud, part, params, t)?;
        let path = out.track(out_dir.join(format!("frame_{i:03}.ppm")));
        write_ppm(&rasterize(&posed, &cam, &opts).image, &path)?;
        let state = match params.kind() {
            MotionType::Revolute => (params.magnitude() * t).to_degrees(),
            MotionType::Prismatic => params.magnitude() * t,
        };
        index.push(serde_json::json!({ "frame": i, "t": t, "joint_state": state }));
    }
    let idx = out.track(out_dir.join("frames.json"));
    std::fs::write(idx, serde_json::to_vec_pretty(&index)?)?;
    out.committed = true;
    Ok(())
}

fn export_ply(manifest: &Path, path: &Path, t: f64) -> anyhow::Result<()> {
    let (m, mut cloud) = load_run(manifest)?;
    for (&id, p) in &m.motions {
        cloud = transform_cloud(&cloud, id, p, t)?;
    }
    let mut out = Outputs::file(path);
    write_ply(&cloud, path)?;
    out.committed = true;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let core = err
        .chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map(Error::root);
    match core {
        Some(Error::Divergence { .. } | Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. }) => 3,
        Some(Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a, RunMode::Single, None),
        Command::TrainVanilla { train: a, kind } => train(a, RunMode::Vanilla, Some(*kind)),
        Command::TrainMulti(a) => train(a, RunMode::Multi, None),
        Command::Eval { manifest, data } => eval(manifest, data.as_deref()),
        Command::RenderSequence {
            manifest,
            out,
            frames,
            part,
            res,
            view,
            views,
        } => render_sequence(manifest, out, *frames, *part, *res, *view, *views),
        Command::ExportPly { manifest, out, t } => export_ply(manifest, out, *t),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
