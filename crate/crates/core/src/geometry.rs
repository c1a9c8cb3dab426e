//! Points, oriented boxes, and the polar direction/rotation binning used to
//! key the dense-object database.
//!
//! All coordinates are in the LiDAR sensor frame: x forward, y left, z up.
//! Angles are measured counter-clockwise from +x in the xy-plane.

use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("object center lies on the sensor axis (x = y = 0); direction is undefined")]
    DegenerateCenter,
    #[error("box dimensions must be positive, got {0:?}")]
    NonPositiveDims([f64; 3]),
}

/// A single LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Object category. The three KITTI classes get dedicated variants; anything
/// else is carried by name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    Pedestrian,
    Cyclist,
    Car,
    Other(String),
}

impl ClassLabel {
    pub const STANDARD: [ClassLabel; 3] = [ClassLabel::Pedestrian, ClassLabel::Cyclist, ClassLabel::Car];

    pub fn parse(name: &str) -> Self {
        match name {
            "Pedestrian" => ClassLabel::Pedestrian,
            "Cyclist" => ClassLabel::Cyclist,
            "Car" => ClassLabel::Car,
            other => ClassLabel::Other(other.to_string()),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            ClassLabel::Pedestrian => "Pedestrian",
            ClassLabel::Cyclist => "Cyclist",
            ClassLabel::Car => "Car",
            ClassLabel::Other(s) => s,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Oriented 3D box. `dims` is (length, width, height); length runs along the
/// heading direction given by `yaw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub class_label: ClassLabel,
}

impl Box3D {
    /// Builds a box, normalizing `yaw` into `[0, 2π)`.
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64, class_label: ClassLabel) -> Result<Self, GeometryError> {
        if !dims.iter().all(|d| *d > 0.0 && d.is_finite()) {
            return Err(GeometryError::NonPositiveDims(dims));
        }
        Ok(Self { center, dims, yaw: normalize_angle(yaw), class_label })
    }

    /// Inclusive containment test against the box grown by `margin` on every
    /// side of every axis.
    pub fn contains(&self, p: &Point3, margin: f64) -> bool {
        let [lx, ly, lz] = self.local_xyz(p);
        lx.abs() <= self.dims[0] / 2.0 + margin
            && ly.abs() <= self.dims[1] / 2.0 + margin
            && lz.abs() <= self.dims[2] / 2.0 + margin
    }

    /// Coordinates of `p` in this box's object frame.
    pub fn local_xyz(&self, p: &Point3) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.x - self.center[0];
        let dy = p.y - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p.z - self.center[2]]
    }

    /// The four BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.dims[0] / 2.0;
        let hw = self.dims[1] / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }
}

/// Database key: class plus direction and rotation bins, 0-based.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PolarIndex {
    pub class_label: ClassLabel,
    pub dir_bin: u32,
    pub rot_bin: u32,
}

/// Wraps any finite angle into `[0, 2π)`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    // rem_euclid can round a tiny negative input up to exactly 2π
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Bearing of the box center seen from the sensor, in `[0, 2π)`.
pub fn direction_angle(b: &Box3D) -> Result<f64, GeometryError> {
    let [x, y, _] = b.center;
    if x == 0.0 && y == 0.0 {
        return Err(GeometryError::DegenerateCenter);
    }
    Ok(normalize_angle(y.atan2(x)))
}

/// Heading of the box in the sensor frame, in `[0, 2π)`.
pub fn rotation_angle(b: &Box3D) -> f64 {
    normalize_angle(b.yaw)
}

fn angle_bin(angle: f64, n: u32) -> u32 {
    let bin = (angle * f64::from(n) / TAU).floor();
    if bin <= 0.0 {
        0
    } else {
        (bin as u32).min(n - 1)
    }
}

/// Maps (direction, rotation) into one of `n × n` equal angular cells.
///
/// `n` must be at least 1.
pub fn group_index(alpha: f64, beta: f64, class_label: ClassLabel, n: u32) -> PolarIndex {
    assert!(n >= 1, "bin count must be positive");
    PolarIndex { class_label, dir_bin: angle_bin(alpha, n), rot_bin: angle_bin(beta, n) }
}

/// Polar index of a labeled box. Fails only for boxes centered on the sensor.
pub fn polar_index_of(b: &Box3D, n: u32) -> Result<PolarIndex, GeometryError> {
    Ok(group_index(direction_angle(b)?, rotation_angle(b), b.class_label.clone(), n))
}

/// Sensor-frame points into the box frame: translate by −center, rotate by −yaw.
pub fn to_local(points: &[Point3], b: &Box3D) -> Vec<Point3> {
    points
        .iter()
        .map(|p| {
            let [x, y, z] = b.local_xyz(p);
            Point3::new(x, y, z, p.intensity)
        })
        .collect()
}

/// Inverse of [`to_local`].
pub fn to_global(points: &[Point3], b: &Box3D) -> Vec<Point3> {
    let (s, c) = b.yaw.sin_cos();
    points
        .iter()
        .map(|p| {
            Point3::new(
                c * p.x - s * p.y + b.center[0],
                s * p.x + c * p.y + b.center[1],
                p.z + b.center[2],
                p.intensity,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn car_at(center: [f64; 3], yaw: f64) -> Box3D {
        Box3D::new(center, [4.0, 2.0, 1.5], yaw, ClassLabel::Car).unwrap()
    }

    #[test]
    fn direction_examples() {
        assert_eq!(direction_angle(&car_at([10.0, 0.0, -1.0], 0.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(direction_angle(&car_at([0.0, 5.0, 0.0], 0.0)).unwrap(), FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(direction_angle(&car_at([-3.0, -3.0, 0.0], 0.0)).unwrap(), 5.0 * PI / 4.0, epsilon = 1e-12);
        assert_eq!(direction_angle(&car_at([0.0, 0.0, 3.0], 0.0)), Err(GeometryError::DegenerateCenter));
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(rotation_angle(&car_at([1.0, 0.0, 0.0], 0.0)), 0.0);
        assert_abs_diff_eq!(rotation_angle(&car_at([1.0, 0.0, 0.0], -FRAC_PI_2)), 3.0 * FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(rotation_angle(&car_at([1.0, 0.0, 0.0], 3.5 * PI)), 3.0 * FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn group_index_examples() {
        let g = group_index(0.0, 0.0, ClassLabel::Car, 8);
        assert_eq!((g.dir_bin, g.rot_bin), (0, 0));
        let g = group_index(PI, 1.5 * PI, ClassLabel::Car, 8);
        assert_eq!((g.dir_bin, g.rot_bin), (4, 6));
        let g = group_index(TAU - 1e-9, 0.0, ClassLabel::Car, 8);
        assert_eq!((g.dir_bin, g.rot_bin), (7, 0));
    }

    #[test]
    fn normalize_handles_tiny_negative() {
        let a = normalize_angle(-1e-300);
        assert!((0.0..TAU).contains(&a));
    }

    #[test]
    fn local_examples() {
        let b = car_at([3.0, -2.0, 0.5], FRAC_PI_2);
        let c = Point3::new(3.0, -2.0, 0.5, 0.7);
        let out = to_local(&[c, Point3::new(3.0, -1.0, 0.5, 0.0)], &b);
        assert_abs_diff_eq!(out[0].x, 0.0);
        assert_abs_diff_eq!(out[0].y, 0.0);
        assert_abs_diff_eq!(out[0].z, 0.0);
        assert_eq!(out[0].intensity, 0.7);
        assert_abs_diff_eq!(out[1].x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1].y, 0.0, epsilon = 1e-12);
        let back = to_global(&[Point3::new(1.0, 0.0, 0.0, 0.0)], &b);
        assert_abs_diff_eq!(back[0].x, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back[0].y, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn containment_is_inclusive_at_margin() {
        let b = car_at([0.0, 10.0, 0.0], 0.0);
        assert!(b.contains(&Point3::new(2.25, 10.0, 0.0, 0.0), 0.25));
        assert!(!b.contains(&Point3::new(2.2501, 10.0, 0.0, 0.0), 0.25));
    }

    #[test]
    fn n_one_single_bin() {
        for k in 0..100 {
            let a = k as f64 * TAU / 100.0;
            let g = group_index(a, TAU - a - 1e-12, ClassLabel::Cyclist, 1);
            assert_eq!((g.dir_bin, g.rot_bin), (0, 0));
        }
    }

    proptest! {
        #[test]
        fn bins_in_range(a in 0.0..TAU, b in 0.0..TAU, n in 1u32..64) {
            let g = group_index(a, b, ClassLabel::Car, n);
            prop_assert!(g.dir_bin < n && g.rot_bin < n);
        }

        #[test]
        fn rotating_one_bin_width_steps_dir_bin(r in 5.0..50.0f64, frac in 0.05..0.95f64, k in 0u32..16, n in 1u32..16) {
            let k = k % n;
            let width = TAU / f64::from(n);
            let a0 = (f64::from(k) + frac) * width;
            let a1 = a0 + width;
            let b0 = car_at([r * a0.cos(), r * a0.sin(), 0.0], 0.0);
            let b1 = car_at([r * a1.cos(), r * a1.sin(), 0.0], 0.0);
            let i0 = polar_index_of(&b0, n).unwrap();
            let i1 = polar_index_of(&b1, n).unwrap();
            prop_assert_eq!(i1.dir_bin, (i0.dir_bin + 1) % n);
        }

        #[test]
        fn direction_ignores_z(x in -50.0..50.0f64, y in 0.5..50.0f64, z1 in -5.0..5.0f64, z2 in -5.0..5.0f64) {
            let a = direction_angle(&car_at([x, y, z1], 0.0)).unwrap();
            let b = direction_angle(&car_at([x, y, z2], 0.0)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn local_global_round_trip(
            px in -100.0..100.0f64, py in -100.0..100.0f64, pz in -10.0..10.0f64,
            cx in -80.0..80.0f64, cy in -80.0..80.0f64, yaw in -10.0..10.0f64,
        ) {
            let b = car_at([cx, cy, -1.0], yaw);
            let p = Point3::new(px, py, pz, 0.3);
            let q = to_global(&to_local(&[p], &b), &b)[0];
            prop_assert!((q.x - p.x).abs() < 1e-6 && (q.y - p.y).abs() < 1e-6 && (q.z - p.z).abs() < 1e-6);
        }
    }
}
