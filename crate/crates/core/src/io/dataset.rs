//! On-disk datasets: `state_<k>/view_<i>.ppm`, `cameras.json`, optional `gt.json`.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::ppm::{read_ppm, write_ppm};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::synth::GroundTruth;
use crate::view::View;

pub const DATASET_SCHEMA: u32 = 1;

/// Camera as stored in `cameras.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            translation: c.translation.into(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera> {
        let cam = Camera {
            rotation: Matrix3::from_row_slice(&self.rotation),
            translation: Vector3::from(self.translation),
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateCameras {
    pub views: Vec<CameraRecord>,
    /// Held-out evaluation views stored as `holdout_<i>.ppm`.
    #[serde(default)]
    pub holdout: Vec<CameraRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamerasFile {
    pub schema_version: u32,
    pub states: Vec<StateCameras>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateData {
    pub views: Vec<View>,
    pub holdout: Vec<View>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub states: Vec<StateData>,
    pub gt: Option<GroundTruth>,
}

impl Dataset {
    pub fn training_views(&self) -> Vec<Vec<View>> {
        self.states.iter().map(|s| s.views.clone()).collect()
    }
}

fn state_dir(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("state_{k}"))
}

/// Writes images (8-bit), camera records and the optional ground truth.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut cams = CamerasFile {
        schema_version: DATASET_SCHEMA,
        states: Vec::new(),
    };
    for (k, s) in data.states.iter().enumerate() {
        let sd = state_dir(dir, k);
        std::fs::create_dir_all(&sd)?;
        for (i, v) in s.views.iter().enumerate() {
            write_ppm(&v.image, &sd.join(format!("view_{i}.ppm")))?;
        }
        for (i, v) in s.holdout.iter().enumerate() {
            write_ppm(&v.image, &sd.join(format!("holdout_{i}.ppm")))?;
        }
        cams.states.push(StateCameras {
            views: s.views.iter().map(|v| CameraRecord::from(&v.camera)).collect(),
            holdout: s.holdout.iter().map(|v| CameraRecord::from(&v.camera)).collect(),
        });
    }
    std::fs::write(dir.join("cameras.json"), serde_json::to_vec_pretty(&cams)?)?;
    if let Some(gt) = &data.gt {
        std::fs::write(dir.join("gt.json"), serde_json::to_vec(gt)?)?;
    }
    Ok(())
}

fn load_views(sd: &Path, prefix: &str, records: &[CameraRecord]) -> Result<Vec<View>> {
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let path = sd.join(format!("{prefix}_{i}.ppm"));
            let image = read_ppm(&path)?;
            if image.width != rec.width || image.height != rec.height {
                return Err(Error::Decode {
                    path: path.display().to_string(),
                    message: format!(
                        "image is {}x{} but its camera is {}x{}",
                        image.width, image.height, rec.width, rec.height
                    ),
                });
            }
            Ok(View {
                camera: rec.to_camera()?,
                image,
            })
        })
        .collect()
}

fn count_files(sd: &Path, prefix: &str) -> usize {
    std::fs::read_dir(sd)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| {
                    let n = e.file_name();
                    let n = n.to_string_lossy();
                    n.starts_with(&format!("{prefix}_")) && n.ends_with(".ppm")
                })
                .count()
        })
        .unwrap_or(0)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let cams_path = dir.join("cameras.json");
    let text = std::fs::read_to_string(&cams_path).map_err(|e| Error::Decode {
        path: cams_path.display().to_string(),
        message: e.to_string(),
    })?;
    let cams: CamerasFile = serde_json::from_str(&text)?;
    if cams.schema_version != DATASET_SCHEMA {
        return Err(Error::Config(format!("unsupported dataset schema_version {}", cams.schema_version)));
    }
    let mut states = Vec::with_capacity(cams.states.len());
    for (k, sc) in cams.states.iter().enumerate() {
        let sd = state_dir(dir, k);
        for (prefix, n) in [("view", sc.views.len()), ("holdout", sc.holdout.len())] {
            let found = count_files(&sd, prefix);
            if found != n {
                return Err(Error::DimensionMismatch(format!(
                    "state {k}: {n} {prefix} cameras but {found} {prefix} images"
                )));
            }
        }
        states.push(StateData {
            views: load_views(&sd, "view", &sc.views)?,
            holdout: load_views(&sd, "holdout", &sc.holdout)?,
        });
    }
    let gt_path = dir.join("gt.json");
    let gt = if gt_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(&gt_path)?)?)
    } else {
        None
    };
    Ok(Dataset { states, gt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{fibonacci_cameras, render_views, make_scene, CameraRig, SceneSpec, Template};

    fn small() -> Dataset {
        let (cloud, gt) = make_scene(&SceneSpec::template(Template::Door), 3).unwrap();
        let v = render_views(&cloud, &fibonacci_cameras(8, 12, &CameraRig::default()));
        let h = render_views(&cloud, &fibonacci_cameras(2, 12, &CameraRig { phase: 1.0, ..Default::default() }));
        Dataset {
            states: vec![StateData { views: v, holdout: h }],
            gt: Some(gt),
        }
    }

    #[test]
    fn camera_record_round_trip() {
        let cam = &fibonacci_cameras(3, 20, &CameraRig::default())[1];
        let back = CameraRecord::from(cam).to_camera().unwrap();
        assert_eq!(&back, cam);
    }

    #[test]
    fn count_mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let data = small();
        write_dataset(dir.path(), &data).unwrap();
        let loaded = read_dataset(dir.path()).unwrap();
        assert_eq!(loaded.gt, data.gt);
        for (a, b) in loaded.states[0].views.iter().zip(&data.states[0].views) {
            assert_eq!(a.image, b.image.quantized());
            assert_eq!(a.camera, b.camera);
        }
        std::fs::write(dir.path().join("state_0/view_2.ppm"), b"P6\n12 12\n255\nxx").unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("view_2.ppm"), "{err}");
        std::fs::remove_file(dir.path().join("state_0/view_2.ppm")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn ground_truth_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = small();
        data.gt = None;
        write_dataset(dir.path(), &data).unwrap();
        assert!(read_dataset(dir.path()).unwrap().gt.is_none());
    }
}
