//! Synthetic LiDAR scenes: labeled boxes on a ground plane, scanned by a
//! spinning multi-beam sensor with first-hit ray casting. Far objects get
//! fewer points and only sensor-facing surfaces are hit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::fingerprint;
use crate::geometry::{Box3D, ClassLabel, Point3};
use crate::kitti::crop_objects;
use crate::model::BevConfig;
use crate::scene::Scene;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("could not place object {object} of scene {scene} after {tries} tries")]
    PlacementFailure { scene: u64, object: usize, tries: usize },
    #[error("invalid simulator configuration: {0}")]
    InvalidConfig(String),
}

/// Box shell template: mean (l, w, h) and relative jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTemplate {
    pub class: String,
    pub dims: [f64; 3],
    pub jitter: f64,
    /// Relative sampling weight.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Unlabeled distractor boxes per scene, at most.
    pub clutter_max: usize,
    pub templates: Vec<ClassTemplate>,
    /// Horizontal angular step, radians.
    pub azimuth_res: f64,
    pub beams: usize,
    /// Lowest and highest beam elevation, radians.
    pub elevation_min: f64,
    pub elevation_max: f64,
    /// Half-width of the scanned sector, radians.
    pub fov_half: f64,
    pub max_range: f64,
    pub sensor_height: f64,
    /// Range noise σ, meters (truncated at 3σ).
    pub noise_sigma: f64,
    /// Region object centers are drawn from.
    pub place_x: [f64; 2],
    pub place_y: [f64; 2],
    /// Margin used to crop object point sets from the scan.
    pub crop_margin: f64,
    /// Additive noise σ of the rendered camera grid.
    pub camera_noise: f64,
    /// Probability that an object is missing from the camera render.
    pub camera_dropout: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let t = |class: &str, dims: [f64; 3], weight: f64| ClassTemplate { class: class.into(), dims, jitter: 0.1, weight };
        Self {
            train_scenes: 200,
            val_scenes: 50,
            objects_min: 3,
            objects_max: 7,
            clutter_max: 3,
            templates: vec![t("Car", [4.0, 1.8, 1.5], 0.5), t("Pedestrian", [0.8, 0.6, 1.75], 0.25), t("Cyclist", [1.8, 0.6, 1.7], 0.25)],
            azimuth_res: 0.5_f64.to_radians(),
            beams: 16,
            elevation_min: (-15.0_f64).to_radians(),
            elevation_max: 1.0_f64.to_radians(),
            fov_half: 50.0_f64.to_radians(),
            max_range: 50.0,
            sensor_height: 1.73,
            noise_sigma: 0.02,
            place_x: [4.0, 30.0],
            place_y: [-14.0, 14.0],
            crop_margin: 0.2,
            camera_noise: 0.1,
            camera_dropout: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if !(self.azimuth_res > 0.0) || self.beams == 0 || !(self.elevation_max >= self.elevation_min) {
            return bad("angular resolution must be positive");
        }
        if !(self.max_range > 0.0 && self.sensor_height > 0.0 && self.fov_half > 0.0) {
            return bad("ranges must be positive");
        }
        if self.objects_min > self.objects_max {
            return bad("objects_min exceeds objects_max");
        }
        if !(self.noise_sigma >= 0.0 && self.camera_noise >= 0.0) || !(0.0..=1.0).contains(&self.camera_dropout) {
            return bad("noise parameters out of range");
        }
        if self.templates.is_empty() || self.templates.iter().any(|t| !(t.weight > 0.0) || t.dims.iter().any(|d| !(*d > 0.0))) {
            return bad("templates need positive weights and dims");
        }
        if !(self.place_x[1] > self.place_x[0] && self.place_y[1] > self.place_y[0]) {
            return bad("placement region is empty");
        }
        Ok(())
    }

    pub fn ground_z(&self) -> f64 {
        -self.sensor_height
    }

    fn elevations(&self) -> Vec<f64> {
        if self.beams == 1 {
            return vec![self.elevation_min];
        }
        let step = (self.elevation_max - self.elevation_min) / (self.beams - 1) as f64;
        (0..self.beams).map(|i| self.elevation_min + step * i as f64).collect()
    }

    fn azimuths(&self) -> Vec<f64> {
        let n = (2.0 * self.fov_half / self.azimuth_res).floor() as usize + 1;
        (0..n).map(|i| -self.fov_half + self.azimuth_res * i as f64).collect()
    }
}

/// What a ray hit first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hit {
    Ground,
    Object(usize),
    Clutter(usize),
}

/// One simulated frame before cropping.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub index: u64,
    pub frame_id: String,
    pub boxes: Vec<Box3D>,
    pub clutter: Vec<Box3D>,
    /// Scan in ray order.
    pub points: Vec<Point3>,
    pub hits: Vec<Hit>,
}

impl SimFrame {
    /// Object/background split of the scan with the configured crop margin.
    pub fn scene(&self, margin: f64) -> Scene {
        crop_objects(&self.points, &self.boxes, margin, &self.frame_id)
    }
}

pub fn frame_id(index: u64) -> String {
    format!("{index:06}")
}

/// Entry distance of the ray `t·d` (t > 0) into `b`, if any.
pub fn ray_box(d: [f64; 3], b: &Box3D) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    // origin and direction in the box frame
    let o = [-(c * b.center[0] + s * b.center[1]), -(-s * b.center[0] + c * b.center[1]), -b.center[2]];
    let dl = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        let half = b.dims[a] / 2.0;
        if dl[a].abs() < 1e-15 {
            if o[a].abs() > half {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((-half - o[a]) / dl[a], (half - o[a]) / dl[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

fn footprint_radius(dims: [f64; 3]) -> f64 {
    (dims[0] * dims[0] + dims[1] * dims[1]).sqrt() / 2.0
}

fn round32(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Scans a fixed layout. Deterministic in `rng`.
pub fn scan_layout(cfg: &SimConfig, boxes: &[Box3D], clutter: &[Box3D], rng: &mut impl Rng) -> (Vec<Point3>, Vec<Hit>) {
    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-300)).expect("sigma is finite");
    let reflect: Vec<f64> = boxes.iter().map(|_| rng.random_range(0.2..0.8)).collect();
    let (mut points, mut hits) = (Vec::new(), Vec::new());
    for &e in &cfg.elevations() {
        for &a in &cfg.azimuths() {
            let d = [e.cos() * a.cos(), e.cos() * a.sin(), e.sin()];
            let mut best: Option<(f64, Hit)> = None;
            let mut consider = |t: f64, h: Hit| {
                if t <= cfg.max_range && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, h));
                }
            };
            if d[2] < 0.0 {
                consider(-cfg.sensor_height / d[2], Hit::Ground);
            }
            for (i, b) in boxes.iter().enumerate() {
                if let Some(t) = ray_box(d, b) {
                    consider(t, Hit::Object(i));
                }
            }
            for (i, b) in clutter.iter().enumerate() {
                if let Some(t) = ray_box(d, b) {
                    consider(t, Hit::Clutter(i));
                }
            }
            let Some((t, hit)) = best else { continue };
            let dt = if cfg.noise_sigma > 0.0 {
                noise.sample(rng).clamp(-3.0 * cfg.noise_sigma, 3.0 * cfg.noise_sigma)
            } else {
                0.0
            };
            let intensity = match hit {
                Hit::Ground => rng.random_range(0.05..0.15),
                Hit::Object(i) => (reflect[i] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0),
                Hit::Clutter(_) => rng.random_range(0.2..0.4),
            };
            let r = t + dt;
            points.push(Point3::new(round32(d[0] * r), round32(d[1] * r), round32(d[2] * r), round32(intensity)));
            hits.push(hit);
        }
    }
    (points, hits)
}

fn pick_template<'a>(cfg: &'a SimConfig, rng: &mut impl Rng) -> &'a ClassTemplate {
    let total: f64 = cfg.templates.iter().map(|t| t.weight).sum();
    let mut u = rng.random_range(0.0..total);
    for t in &cfg.templates {
        if u < t.weight {
            return t;
        }
        u -= t.weight;
    }
    cfg.templates.last().expect("validated nonempty")
}

/// Draws a non-overlapping layout of labeled objects and clutter.
pub fn place_layout(cfg: &SimConfig, index: u64, rng: &mut impl Rng) -> Result<(Vec<Box3D>, Vec<Box3D>), SimError> {
    const TRIES: usize = 200;
    let n = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let n_clutter = rng.random_range(0..=cfg.clutter_max);
    let mut placed: Vec<Box3D> = Vec::new();
    let mut specs: Vec<(ClassLabel, [f64; 3])> = (0..n)
        .map(|_| {
            let t = pick_template(cfg, rng);
            let dims = t.dims.map(|d| d * (1.0 + rng.random_range(-t.jitter..=t.jitter)));
            (ClassLabel::parse(&t.class), dims)
        })
        .collect();
    for _ in 0..n_clutter {
        let dims = [rng.random_range(0.3..1.5), rng.random_range(0.3..1.5), rng.random_range(0.5..2.5)];
        specs.push((ClassLabel::Other("Clutter".into()), dims));
    }
    for (k, (class, dims)) in specs.into_iter().enumerate() {
        let mut ok = false;
        for _ in 0..TRIES {
            let x = rng.random_range(cfg.place_x[0]..cfg.place_x[1]);
            let y = rng.random_range(cfg.place_y[0]..cfg.place_y[1]);
            let yaw = rng.random_range(0.0..std::f64::consts::TAU);
            if y.atan2(x).abs() > cfg.fov_half - 0.05 {
                continue;
            }
            let r = footprint_radius(dims);
            let clear = placed.iter().all(|p| {
                let d = ((p.center[0] - x).powi(2) + (p.center[1] - y).powi(2)).sqrt();
                d > r + footprint_radius(p.dims) + 0.3
            });
            if clear {
                let center = [x, y, cfg.ground_z() + dims[2] / 2.0];
                placed.push(Box3D::new(center, dims, yaw, class.clone()).expect("template dims are positive"));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(SimError::PlacementFailure { scene: index, object: k, tries: TRIES });
        }
    }
    let clutter = placed.split_off(n);
    Ok((placed, clutter))
}

/// Fully deterministic per (seed, index).
pub fn simulate_frame(cfg: &SimConfig, index: u64) -> Result<SimFrame, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(fingerprint::sub_seed(cfg.seed, format!("scene/{index}").as_bytes()));
    let (boxes, clutter) = place_layout(cfg, index, &mut rng)?;
    let (points, hits) = scan_layout(cfg, &boxes, &clutter, &mut rng);
    Ok(SimFrame { index, frame_id: frame_id(index), boxes, clutter, points, hits })
}

/// Scene (cropped with the configured margin) and its ground-truth boxes.
pub fn generate_scene(cfg: &SimConfig, index: u64) -> Result<(Scene, Vec<Box3D>), SimError> {
    let f = simulate_frame(cfg, index)?;
    Ok((f.scene(cfg.crop_margin), f.boxes))
}

/// Top-down render of labeled boxes: channel 0 is silhouette occupancy,
/// channels 1.. are per-class splats peaking at 1 on the box center and
/// ≥ 0.5 anywhere inside the (half-cell grown) footprint. Gaussian noise is
/// added everywhere.
pub fn render_camera_grid(boxes: &[Box3D], bev: &BevConfig, cfg: &SimConfig, index: u64) -> Tensor<f32> {
    let (h, w, cc) = (bev.height(), bev.width(), bev.camera_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(fingerprint::sub_seed(cfg.seed, format!("camera/{index}").as_bytes()));
    let visible: Vec<&Box3D> = boxes.iter().filter(|_| !rng.random_bool(cfg.camera_dropout)).collect();
    let mut grid = Tensor::grid(h, w, cc);
    let grow = bev.cell / 2.0;
    for b in visible {
        let slot = crate::model::HEAD_CLASSES.iter().position(|c| *c == b.class_label).map(|s| s + 1);
        let (hl, hw) = (b.dims[0] / 2.0 + grow, b.dims[1] / 2.0 + grow);
        for r in 0..h {
            for c in 0..w {
                let (x, y) = bev.cell_center(r, c);
                let [u, v, _] = b.local_xyz(&Point3::new(x, y, b.center[2], 0.0));
                let m = (u.abs() / hl).max(v.abs() / hw);
                if m > 1.0 {
                    continue;
                }
                grid.set3(r, c, 0, 1.0);
                if let Some(s) = slot.filter(|s| *s < cc) {
                    let val = (1.0 - 0.5 * m) as f32;
                    if grid.get3(r, c, s) < val {
                        grid.set3(r, c, s, val);
                    }
                }
            }
        }
    }
    if cfg.camera_noise > 0.0 {
        let noise = Normal::new(0.0, cfg.camera_noise).expect("finite sigma");
        grid.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng) as f32);
    }
    grid
}
