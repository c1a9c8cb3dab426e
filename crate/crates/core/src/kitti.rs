//! KITTI object-detection formats: velodyne scans, label files, calibration,
//! plus object cropping and ASCII PLY export.
//!
//! Label files describe boxes in the rectified camera frame (y down, location
//! at the center of the bottom face). [`read_labels`] lifts them into the
//! LiDAR frame through `R0_rect` and `Tr_velo_to_cam`; [`write_labels`] is the
//! inverse.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{Box3D, ClassLabel, GeometryError, Point3};
use crate::scene::{ObjectPoints, Scene, SourceId};

#[derive(Debug, thiserror::Error)]
pub enum KittiError {
    #[error("velodyne stream length {0} is not a multiple of 16 bytes")]
    TruncatedFile(usize),
    #[error("non-finite value in point {index}")]
    NonFiniteValue { index: usize },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("calibration is missing key {0}")]
    MissingCalibKey(&'static str),
    #[error("R0_rect is not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("calibration extrinsic rotation is singular")]
    SingularExtrinsic,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

const POINT_BYTES: usize = 16;

/// Parses a velodyne scan, also returning how many intensities were clamped
/// into `[0, 1]`.
pub fn read_velodyne_counted(bytes: &[u8]) -> Result<(Vec<Point3>, usize), KittiError> {
    if bytes.len() % POINT_BYTES != 0 {
        return Err(KittiError::TruncatedFile(bytes.len()));
    }
    let mut clamped = 0;
    let mut points = Vec::with_capacity(bytes.len() / POINT_BYTES);
    for (index, rec) in bytes.chunks_exact(POINT_BYTES).enumerate() {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
        let (x, y, z, r) = (f(0), f(1), f(2), f(3));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && r.is_finite()) {
            return Err(KittiError::NonFiniteValue { index });
        }
        let intensity = if (0.0..=1.0).contains(&r) {
            r
        } else {
            clamped += 1;
            r.clamp(0.0, 1.0)
        };
        points.push(Point3::new(x.into(), y.into(), z.into(), intensity.into()));
    }
    Ok((points, clamped))
}

/// Parses a velodyne scan: little-endian `f32` quadruplets (x, y, z, reflectance).
pub fn read_velodyne(bytes: &[u8]) -> Result<Vec<Point3>, KittiError> {
    let (points, clamped) = read_velodyne_counted(bytes)?;
    if clamped > 0 {
        log::warn!("clamped {clamped} reflectance values into [0, 1]");
    }
    Ok(points)
}

/// Serializes points as velodyne records. Coordinates are narrowed to `f32`.
pub fn write_velodyne(points: &[Point3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * POINT_BYTES);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Extrinsics and rectification needed to move labels into the LiDAR frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibMatrices {
    /// 3×4 row-major `[R | t]`, velodyne → reference camera.
    pub tr_velo_to_cam: [[f64; 4]; 3],
    /// 3×3 row-major rectifying rotation.
    pub r0_rect: [[f64; 3]; 3],
}

impl CalibMatrices {
    pub fn identity() -> Self {
        Self {
            tr_velo_to_cam: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
            r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// The usual KITTI axis permutation (camera x right, y down, z forward)
    /// with a small lever arm and identity rectification.
    pub fn kitti_like() -> Self {
        Self {
            tr_velo_to_cam: [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, -0.08], [1.0, 0.0, 0.0, -0.27]],
            r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Parses `KEY: v1 v2 …` lines. Unknown keys (P0..P3, Tr_imu_to_velo) are ignored.
    pub fn parse(text: &str) -> Result<Self, KittiError> {
        let mut tr = None;
        let mut r0 = None;
        for (i, line) in text.lines().enumerate() {
            let Some((key, rest)) = line.split_once(':') else {
                continue;
            };
            let key = key.trim();
            if key != "Tr_velo_to_cam" && key != "R0_rect" {
                continue;
            }
            let vals = rest
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| KittiError::MalformedLine { line: i + 1, reason: e.to_string() })?;
            let expected = if key == "R0_rect" { 9 } else { 12 };
            if vals.len() != expected {
                return Err(KittiError::MalformedLine {
                    line: i + 1,
                    reason: format!("{key} needs {expected} values, found {}", vals.len()),
                });
            }
            if key == "R0_rect" {
                r0 = Some([[vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]], [vals[6], vals[7], vals[8]]]);
            } else {
                let mut m = [[0.0; 4]; 3];
                for (k, v) in vals.into_iter().enumerate() {
                    m[k / 4][k % 4] = v;
                }
                tr = Some(m);
            }
        }
        let calib = Self {
            tr_velo_to_cam: tr.ok_or(KittiError::MissingCalibKey("Tr_velo_to_cam"))?,
            r0_rect: r0.ok_or(KittiError::MissingCalibKey("R0_rect"))?,
        };
        calib.validate()?;
        Ok(calib)
    }

    pub fn validate(&self) -> Result<(), KittiError> {
        let r0 = self.r0();
        let dev = (r0.transpose() * r0 - Matrix3::identity()).abs().max();
        if dev >= 1e-3 {
            return Err(KittiError::NotOrthonormal(dev));
        }
        if self.extrinsic_rotation().try_inverse().is_none() {
            return Err(KittiError::SingularExtrinsic);
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("R0_rect:");
        for row in &self.r0_rect {
            for v in row {
                write!(s, " {v:e}").unwrap();
            }
        }
        s.push_str("\nTr_velo_to_cam:");
        for row in &self.tr_velo_to_cam {
            for v in row {
                write!(s, " {v:e}").unwrap();
            }
        }
        s.push('\n');
        s
    }

    fn r0(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.r0_rect[i][j])
    }

    fn extrinsic_rotation(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.tr_velo_to_cam[i][j])
    }

    fn extrinsic_translation(&self) -> Vector3<f64> {
        Vector3::new(self.tr_velo_to_cam[0][3], self.tr_velo_to_cam[1][3], self.tr_velo_to_cam[2][3])
    }

    /// Velodyne point → rectified camera frame.
    pub fn velo_to_rect(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.r0() * (self.extrinsic_rotation() * Vector3::from(p) + self.extrinsic_translation());
        [v.x, v.y, v.z]
    }

    /// Rectified camera point → velodyne frame.
    pub fn rect_to_velo(&self, q: [f64; 3]) -> Result<[f64; 3], KittiError> {
        let (r0_inv, r_inv) = self.inverses()?;
        let v = r_inv * (r0_inv * Vector3::from(q) - self.extrinsic_translation());
        Ok([v.x, v.y, v.z])
    }

    fn inverses(&self) -> Result<(Matrix3<f64>, Matrix3<f64>), KittiError> {
        let r0_inv = self.r0().try_inverse().ok_or(KittiError::NotOrthonormal(f64::INFINITY))?;
        let r_inv = self.extrinsic_rotation().try_inverse().ok_or(KittiError::SingularExtrinsic)?;
        Ok((r0_inv, r_inv))
    }
}

/// One line of a KITTI label file.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabel {
    pub kind: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox2d: [f64; 4],
    pub dims_hwl: [f64; 3],
    pub location_cam: [f64; 3],
    pub rotation_y: f64,
}

impl KittiLabel {
    pub fn parse_line(line: &str, line_no: usize) -> Result<Self, KittiError> {
        let bad = |reason: String| KittiError::MalformedLine { line: line_no, reason };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 {
            return Err(bad(format!("expected 15 fields, found {}", fields.len())));
        }
        let num = |i: usize| fields[i].parse::<f64>().map_err(|e| bad(format!("field {}: {e}", i + 1)));
        let label = Self {
            kind: fields[0].to_string(),
            truncated: num(1)?,
            occluded: fields[2].parse::<i32>().map_err(|e| bad(format!("field 3: {e}")))?,
            alpha: num(3)?,
            bbox2d: [num(4)?, num(5)?, num(6)?, num(7)?],
            dims_hwl: [num(8)?, num(9)?, num(10)?],
            location_cam: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
        };
        if label.kind != "DontCare" && !label.dims_hwl.iter().all(|d| *d > 0.0) {
            return Err(bad(format!("non-positive dimensions {:?}", label.dims_hwl)));
        }
        Ok(label)
    }

    pub fn to_line(&self) -> String {
        let [b0, b1, b2, b3] = self.bbox2d;
        let [h, w, l] = self.dims_hwl;
        let [x, y, z] = self.location_cam;
        format!(
            "{} {} {} {} {b0} {b1} {b2} {b3} {h} {w} {l} {x} {y} {z} {}",
            self.kind, self.truncated, self.occluded, self.alpha, self.rotation_y
        )
    }

    /// Converts to a LiDAR-frame box.
    pub fn to_box(&self, calib: &CalibMatrices) -> Result<Box3D, KittiError> {
        let [h, w, l] = self.dims_hwl;
        let [x, y, z] = self.location_cam;
        let center = calib.rect_to_velo([x, y - h / 2.0, z])?;
        // heading in the rectified frame, pushed through the inverse rotation chain
        let (s, c) = self.rotation_y.sin_cos();
        let (r0_inv, r_inv) = calib.inverses()?;
        let d = r_inv * (r0_inv * Vector3::new(c, 0.0, -s));
        let yaw = d.y.atan2(d.x);
        Ok(Box3D::new(center, [l, w, h], yaw, ClassLabel::parse(&self.kind))?)
    }

    /// Inverse of [`KittiLabel::to_box`]; 2D box, truncation and occlusion are zeroed.
    pub fn from_box(b: &Box3D, calib: &CalibMatrices) -> Self {
        let [l, w, h] = b.dims;
        let c = calib.velo_to_rect(b.center);
        let location_cam = [c[0], c[1] + h / 2.0, c[2]];
        let r = Matrix3::from_fn(|i, j| calib.r0_rect[i][j]) * Matrix3::from_fn(|i, j| calib.tr_velo_to_cam[i][j]);
        let d = r * Vector3::new(b.yaw.cos(), b.yaw.sin(), 0.0);
        let rotation_y = (-d.z).atan2(d.x);
        let alpha = wrap_pi(rotation_y - location_cam[0].atan2(location_cam[2]));
        Self {
            kind: b.class_label.name().to_string(),
            truncated: 0.0,
            occluded: 0,
            alpha,
            bbox2d: [0.0; 4],
            dims_hwl: [h, w, l],
            location_cam,
            rotation_y,
        }
    }
}

fn wrap_pi(a: f64) -> f64 {
    let t = crate::geometry::normalize_angle(a + std::f64::consts::PI);
    t - std::f64::consts::PI
}

/// Parses a label file into LiDAR-frame boxes, skipping `DontCare` and blank lines.
pub fn read_labels(text: &str, calib: &CalibMatrices) -> Result<Vec<Box3D>, KittiError> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let label = KittiLabel::parse_line(line, i + 1)?;
        if label.kind == "DontCare" {
            continue;
        }
        boxes.push(label.to_box(calib)?);
    }
    Ok(boxes)
}

pub fn write_labels(boxes: &[Box3D], calib: &CalibMatrices) -> String {
    boxes.iter().map(|b| KittiLabel::from_box(b, calib).to_line() + "\n").collect()
}

/// Splits a scan into per-box object sets and background. A point goes to the
/// first box (input order) whose margin-expanded volume contains it.
pub fn crop_objects(points: &[Point3], boxes: &[Box3D], margin: f64, frame_id: &str) -> Scene {
    let mut objects: Vec<ObjectPoints> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| ObjectPoints {
            bbox: b.clone(),
            points: Vec::new(),
            source: SourceId { frame_id: frame_id.to_string(), object_index: i },
        })
        .collect();
    let mut background = Vec::new();
    for p in points {
        match boxes.iter().position(|b| b.contains(p, margin)) {
            Some(k) => objects[k].points.push(*p),
            None => background.push(*p),
        }
    }
    Scene { frame_id: frame_id.to_string(), objects, added: Vec::new(), background }
}

/// Color used for pasted points in previews.
pub const ADDED_COLOR: [u8; 3] = [255, 64, 255];
pub const RAW_COLOR: [u8; 3] = [0, 0, 0];

/// ASCII PLY with x/y/z as float and one RGB triple per vertex.
///
/// # Panics
/// If `points` and `colors` differ in length.
pub fn write_ply(points: &[Point3], colors: &[[u8; 3]]) -> String {
    assert_eq!(points.len(), colors.len(), "one color per point");
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {}", points.len()).unwrap();
    s.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
    );
    for (p, [r, g, b]) in points.iter().zip(colors) {
        writeln!(s, "{} {} {} {r} {g} {b}", p.x as f32, p.y as f32, p.z as f32).unwrap();
    }
    s
}

/// Preview of a (possibly enhanced) scene: raw points black, pasted points magenta.
pub fn scene_ply(scene: &Scene) -> String {
    let raw = scene.raw_points();
    let added: Vec<Point3> = scene.added.iter().flat_map(|a| a.points.iter().copied()).collect();
    let mut colors = vec![RAW_COLOR; raw.len()];
    colors.extend(std::iter::repeat_n(ADDED_COLOR, added.len()));
    let mut pts = raw;
    pts.extend(added);
    write_ply(&pts, &colors)
}
