//! Bird's-eye-view grid geometry and the pillar encoding of a point cloud.

use serde::{Deserialize, Serialize};

use crate::fingerprint;
use crate::geometry::Point3;
use crate::tensor::{read_container, write_container, Container, Tensor};

use super::ModelError;

/// Grid rows run along +x, columns along +y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Height window kept by the encoder; also normalizes the height channels.
    pub z_min: f64,
    pub z_max: f64,
    /// Cell edge, meters.
    pub cell: f64,
    /// Encoder output channels.
    pub lidar_channels: usize,
    /// Camera feature channels.
    pub camera_channels: usize,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 32.0,
            y_min: -16.0,
            y_max: 16.0,
            z_min: -2.0,
            z_max: 1.0,
            cell: 0.5,
            lidar_channels: 16,
            camera_channels: 4,
        }
    }
}

/// Pillar features per cell.
pub const PILLAR_CHANNELS: usize = 4;

impl BevConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.cell > 0.0) {
            return bad("cell size must be positive");
        }
        if !(self.x_max > self.x_min && self.y_max > self.y_min && self.z_max > self.z_min) {
            return bad("BEV ranges must be nonempty");
        }
        for (lo, hi) in [(self.x_min, self.x_max), (self.y_min, self.y_max)] {
            let n = (hi - lo) / self.cell;
            if (n - n.round()).abs() > 1e-9 {
                return bad("BEV ranges must be whole multiples of the cell size");
            }
        }
        if self.lidar_channels == 0 || self.camera_channels == 0 {
            return bad("channel counts must be positive");
        }
        Ok(())
    }

    /// Rows (x axis).
    pub fn height(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell).round() as usize
    }

    /// Columns (y axis).
    pub fn width(&self) -> usize {
        ((self.y_max - self.y_min) / self.cell).round() as usize
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::hash_of(self)
    }

    /// Cell containing (x, y), if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let r = ((x - self.x_min) / self.cell).floor();
        let c = ((y - self.y_min) / self.cell).floor();
        if r >= 0.0 && c >= 0.0 && (r as usize) < self.height() && (c as usize) < self.width() {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        (self.x_min + (r as f64 + 0.5) * self.cell, self.y_min + (c as f64 + 0.5) * self.cell)
    }

    fn in_height(&self, z: f64) -> bool {
        z >= self.z_min && z <= self.z_max
    }

    fn norm_height(&self, z: f64) -> f64 {
        (z - self.z_min) / (self.z_max - self.z_min)
    }
}

/// Pillar grid: ln(1+count)/4, mean height, max height (both scaled to
/// [0, 1] over the z window), mean intensity. Empty cells stay zero.
pub fn bev_encode(points: &[Point3], cfg: &BevConfig) -> Tensor<f32> {
    let (h, w) = (cfg.height(), cfg.width());
    let mut count = vec![0u32; h * w];
    let mut zsum = vec![0.0f64; h * w];
    let mut zmax = vec![f64::NEG_INFINITY; h * w];
    let mut isum = vec![0.0f64; h * w];
    for p in points {
        if !cfg.in_height(p.z) {
            continue;
        }
        let Some((r, c)) = cfg.cell_of(p.x, p.y) else { continue };
        let k = r * w + c;
        count[k] += 1;
        zsum[k] += cfg.norm_height(p.z);
        zmax[k] = zmax[k].max(cfg.norm_height(p.z));
        isum[k] += p.intensity;
    }
    let mut out = Tensor::grid(h, w, PILLAR_CHANNELS);
    for k in 0..h * w {
        if count[k] == 0 {
            continue;
        }
        let n = f64::from(count[k]);
        let vals = [(1.0 + n).ln() / 4.0, zsum[k] / n, zmax[k], isum[k] / n];
        for (ch, v) in vals.into_iter().enumerate() {
            out.data_mut()[k * PILLAR_CHANNELS + ch] = v as f32;
        }
    }
    out
}

/// Serializes a camera feature grid (record name `camera`).
pub fn save_camera_grid(grid: &Tensor<f32>) -> Vec<u8> {
    write_container(&Container { meta: String::new(), records: vec![("camera".into(), grid.clone())] })
}

/// Loads a camera grid and checks it against the BEV layout.
pub fn load_camera_grid(bytes: &[u8], cfg: &BevConfig) -> Result<Tensor<f32>, ModelError> {
    let c = read_container(bytes)?;
    let t = c.get("camera").ok_or_else(|| ModelError::Config("container has no `camera` record".into()))?;
    let expected = vec![cfg.height(), cfg.width(), cfg.camera_channels];
    if t.shape() != expected.as_slice() {
        return Err(ModelError::ShapeMismatch { expected, found: t.shape().to_vec() });
    }
    Ok(t.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> BevConfig {
        BevConfig { x_min: 0.0, x_max: 4.0, y_min: -2.0, y_max: 2.0, cell: 1.0, ..BevConfig::default() }
    }

    #[test]
    fn shape_and_validation() {
        let cfg = BevConfig::default();
        assert_eq!((cfg.height(), cfg.width()), (64, 64));
        assert!(cfg.validate().is_ok());
        assert!(BevConfig { cell: 0.3, ..cfg.clone() }.validate().is_err());
        assert!(BevConfig { x_max: -1.0, ..cfg.clone() }.validate().is_err());
        assert_ne!(cfg.fingerprint(), BevConfig { cell: 0.25, ..cfg }.fingerprint());
    }

    #[test]
    fn empty_and_single_point() {
        let cfg = small();
        assert!(bev_encode(&[], &cfg).data().iter().all(|v| *v == 0.0));
        let g = bev_encode(&[Point3::new(1.5, 0.5, -1.0, 0.5)], &cfg);
        let nonzero: Vec<usize> = (0..16).filter(|k| g.data()[k * 4..k * 4 + 4].iter().any(|v| *v != 0.0)).collect();
        assert_eq!(nonzero, vec![6]);
        // out of range in x and in z
        let g = bev_encode(&[Point3::new(-0.1, 0.0, 0.0, 0.5), Point3::new(1.0, 0.0, 5.0, 0.5)], &cfg);
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn camera_file_round_trip() {
        let cfg = small();
        let t = Tensor::from_vec(&[4, 4, 4], (0..64).map(|i| i as f32 * 0.25).collect()).unwrap();
        assert_eq!(load_camera_grid(&save_camera_grid(&t), &cfg).unwrap(), t);
        let wrong = Tensor::<f32>::grid(4, 3, 4);
        assert!(matches!(load_camera_grid(&save_camera_grid(&wrong), &cfg), Err(ModelError::ShapeMismatch { .. })));
    }

    proptest! {
        #[test]
        fn matches_brute_force(pts in proptest::collection::vec((-1.0f64..5.0, -3.0f64..3.0, -2.5f64..1.5, 0.0f64..1.0), 0..60)) {
            let cfg = small();
            let points: Vec<Point3> = pts.iter().map(|&(x, y, z, i)| Point3::new(x, y, z, i)).collect();
            let g = bev_encode(&points, &cfg);
            for r in 0..4 {
                for c in 0..4 {
                    let (x0, y0) = (r as f64, c as f64 - 2.0);
                    let inside: Vec<&Point3> = points
                        .iter()
                        .filter(|p| p.x >= x0 && p.x < x0 + 1.0 && p.y >= y0 && p.y < y0 + 1.0 && p.z >= -2.0 && p.z <= 1.0)
                        .collect();
                    let got = [g.get3(r, c, 0), g.get3(r, c, 1), g.get3(r, c, 2), g.get3(r, c, 3)];
                    if inside.is_empty() {
                        prop_assert_eq!(got, [0.0; 4]);
                        continue;
                    }
                    let n = inside.len() as f64;
                    let hz = |z: f64| (z + 2.0) / 3.0;
                    let want = [
                        (1.0 + n).ln() / 4.0,
                        inside.iter().map(|p| hz(p.z)).sum::<f64>() / n,
                        inside.iter().map(|p| hz(p.z)).fold(f64::MIN, f64::max),
                        inside.iter().map(|p| p.intensity).sum::<f64>() / n,
                    ];
                    for (a, b) in got.iter().zip(want) {
                        prop_assert!((f64::from(*a) - b).abs() < 1e-5);
                    }
                }
            }
        }
    }
}
