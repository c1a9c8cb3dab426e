//! Split directories in KITTI layout plus a camera grid per frame:
//!
//! ```text
//! <split>/split.txt          "train" or "val"
//! <split>/velodyne/<id>.bin
//! <split>/label_2/<id>.txt
//! <split>/calib/<id>.txt
//! <split>/camera/<id>.bin    tensor container, record `camera`
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::Box3D;
use crate::kitti::{self, CalibMatrices, KittiError};
use crate::model::{self, BevConfig, ModelError};
use crate::par::{self, Exec};
use crate::scene::Scene;
use crate::simulator::{self, SimConfig, SimError};
use crate::tensor::Tensor;

pub const SPLIT_MARKER: &str = "split.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Kitti { path: PathBuf, source: KittiError },
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: ModelError },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// One labeled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame_id: String,
    pub scene: Scene,
    pub boxes: Vec<Box3D>,
    pub camera: Option<Tensor<f32>>,
}

/// Simulator indices of a split; validation frames follow the training ones.
pub fn split_indices(sim: &SimConfig, split: Split) -> std::ops::Range<u64> {
    let train = sim.train_scenes as u64;
    match split {
        Split::Train => 0..train,
        Split::Val => train..train + sim.val_scenes as u64,
    }
}

/// Simulates a split in memory, with camera grids.
pub fn synthesize(sim: &SimConfig, bev: &BevConfig, split: Split, exec: Exec) -> Result<Vec<Sample>, SimError> {
    let idx: Vec<u64> = split_indices(sim, split).collect();
    par::try_map(exec, &idx, |&i| {
        let (scene, boxes) = simulator::generate_scene(sim, i)?;
        let camera = simulator::render_camera_grid(&boxes, bev, sim, i);
        Ok(Sample { frame_id: scene.frame_id.clone(), scene, boxes, camera: Some(camera) })
    })
}

/// Split named by the marker file, else guessed from the directory name.
pub fn detect_split(dir: &Path) -> Option<Split> {
    if let Ok(text) = fs::read_to_string(dir.join(SPLIT_MARKER)) {
        match text.trim() {
            "train" => return Some(Split::Train),
            "val" => return Some(Split::Val),
            _ => {}
        }
    }
    let name = dir.file_name()?.to_string_lossy().to_lowercase();
    match name.as_str() {
        "train" | "training" => Some(Split::Train),
        "val" | "validation" | "testing" | "test" => Some(Split::Val),
        _ => None,
    }
}

/// Writes `samples` as a split directory. Each velodyne file holds every
/// point of the scene: raw points, then any pasted points.
pub fn write_split(dir: &Path, split: Split, samples: &[Sample], calib: &CalibMatrices) -> Result<(), DataError> {
    for sub in ["velodyne", "label_2", "calib", "camera"] {
        fs::create_dir_all(dir.join(sub)).map_err(io_err(&dir.join(sub)))?;
    }
    let marker = dir.join(SPLIT_MARKER);
    fs::write(&marker, format!("{}\n", split.name())).map_err(io_err(&marker))?;
    for s in samples {
        let write = |sub: &str, ext: &str, bytes: &[u8]| {
            let path = dir.join(sub).join(format!("{}.{ext}", s.frame_id));
            fs::write(&path, bytes).map_err(io_err(&path))
        };
        write("velodyne", "bin", &kitti::write_velodyne(&s.scene.all_points()))?;
        write("label_2", "txt", kitti::write_labels(&s.boxes, calib).as_bytes())?;
        write("calib", "txt", calib.to_text().as_bytes())?;
        if let Some(c) = &s.camera {
            write("camera", "bin", &model::save_camera_grid(c))?;
        }
    }
    Ok(())
}

/// Frame ids of a split, sorted.
pub fn list_frames(dir: &Path) -> Result<Vec<String>, DataError> {
    let velo = dir.join("velodyne");
    let mut ids: Vec<String> = fs::read_dir(&velo)
        .map_err(io_err(&velo))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension()? != "bin" {
                return None;
            }
            Some(p.file_stem()?.to_string_lossy().into_owned())
        })
        .collect();
    ids.sort();
    Ok(ids)
}

/// Loads one frame. The camera grid is optional on disk; when `bev` is
/// given its shape is checked.
pub fn read_frame(dir: &Path, id: &str, margin: f64, bev: Option<&BevConfig>) -> Result<Sample, DataError> {
    let path = |sub: &str, ext: &str| dir.join(sub).join(format!("{id}.{ext}"));
    let read = |p: &Path| fs::read(p).map_err(io_err(p));
    let kit = |p: &Path| {
        let p = p.to_path_buf();
        move |source| DataError::Kitti { path: p, source }
    };
    let vp = path("velodyne", "bin");
    let points = kitti::read_velodyne(&read(&vp)?).map_err(kit(&vp))?;
    let cp = path("calib", "txt");
    let calib = CalibMatrices::parse(&String::from_utf8_lossy(&read(&cp)?)).map_err(kit(&cp))?;
    let lp = path("label_2", "txt");
    let boxes = kitti::read_labels(&String::from_utf8_lossy(&read(&lp)?), &calib).map_err(kit(&lp))?;
    let camp = path("camera", "bin");
    let camera = match (camp.exists(), bev) {
        (false, _) => None,
        (true, Some(b)) => Some(model::load_camera_grid(&read(&camp)?, b).map_err(|source| DataError::Model { path: camp.clone(), source })?),
        (true, None) => {
            let c = crate::tensor::read_container(&read(&camp)?)
                .map_err(|e| DataError::Model { path: camp.clone(), source: ModelError::from(e) })?;
            c.get("camera").cloned()
        }
    };
    let scene = kitti::crop_objects(&points, &boxes, margin, id);
    Ok(Sample { frame_id: id.to_string(), scene, boxes, camera })
}

pub fn read_split(dir: &Path, margin: f64, bev: Option<&BevConfig>, exec: Exec) -> Result<Vec<Sample>, DataError> {
    let ids = list_frames(dir)?;
    par::try_map(exec, &ids, |id| read_frame(dir, id, margin, bev))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_round_trip_through_files() {
        let sim = SimConfig { train_scenes: 3, val_scenes: 2, ..SimConfig::default() };
        let bev = BevConfig::default();
        let train = synthesize(&sim, &bev, Split::Train, Exec::Seq).unwrap();
        let val = synthesize(&sim, &bev, Split::Val, Exec::Seq).unwrap();
        let ids: Vec<&str> = train.iter().chain(&val).map(|s| s.frame_id.as_str()).collect();
        assert_eq!(ids, ["000000", "000001", "000002", "000003", "000004"]);

        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("somewhere");
        write_split(&dir, Split::Val, &val, &CalibMatrices::kitti_like()).unwrap();
        assert_eq!(detect_split(&dir), Some(Split::Val));
        let back = read_split(&dir, sim.crop_margin, Some(&bev), Exec::Seq).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in val.iter().zip(&back) {
            assert_eq!(a.camera, b.camera);
            assert_eq!(a.scene.raw_len(), b.scene.raw_len());
            for (x, y) in a.boxes.iter().zip(&b.boxes) {
                assert!(x.center.iter().zip(y.center).all(|(p, q)| (p - q).abs() < 1e-9));
                assert!((x.yaw - y.yaw).abs() < 1e-9 || (x.yaw - y.yaw).abs() > 6.28);
            }
        }
    }

    #[test]
    fn split_detection_by_name() {
        let tmp = tempfile::tempdir().unwrap();
        let v = tmp.path().join("validation");
        fs::create_dir_all(&v).unwrap();
        assert_eq!(detect_split(&v), Some(Split::Val));
        assert_eq!(detect_split(tmp.path()), None);
    }
}
