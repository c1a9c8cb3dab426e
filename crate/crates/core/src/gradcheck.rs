//! Finite-difference checks of every differentiable op and of the composed
//! detector graph, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fingerprint::sub_seed;
use crate::geometry::{Box3D, ClassLabel};
use crate::model::{build_targets, detection_loss, BevConfig, FusionConfig, FusionKind, NetConfig, Network, PILLAR_CHANNELS};
use crate::par::{self, Exec};
use crate::tensor::{Graph, ParamStore, Reduction, Tensor, TensorError, Var};
use crate::training::{sim_loss, SimLoss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that near-zero
    /// gradients are compared absolutely.
    pub floor: f64,
    /// Random shapes/seeds per check.
    pub cases: usize,
    /// Coordinates probed per parameter tensor (all of them if fewer).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, floor: 1e-3, cases: 20, max_coords: 24, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub case: usize,
    /// Shape of the op's first input.
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, TensorError> + 'a;

/// Compares backward gradients of every parameter in `store` against
/// central differences of the loss built by `build`. Returns the worst
/// relative error and the number of probed coordinates.
pub fn check_graph(store: &ParamStore<f64>, build: &Build<'_>, cfg: &GradCheckConfig, rng: &mut impl Rng) -> Result<(f64, usize), TensorError> {
    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut g = Graph::with_exec(Exec::Seq);
    let loss = build(&mut g, &analytic)?;
    g.backward(loss, &mut analytic)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::with_exec(Exec::Seq);
        let l = build(&mut g, s)?;
        Ok(g.value(l).item())
    };
    let mut probe = store.clone();
    let (mut worst, mut coords) = (0.0_f64, 0usize);
    for id in store.ids() {
        let n = store.get(id).value.len();
        let picks: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, cfg.max_coords).into_vec()
        };
        for k in picks {
            let orig = store.get(id).value.data()[k];
            probe.get_mut(id).value.data_mut()[k] = orig + cfg.step;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig - cfg.step;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.get(id).grad.data()[k];
            worst = worst.max(relative_error(a, numeric, cfg.floor));
            coords += 1;
        }
    }
    Ok((worst, coords))
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("length matches shape")
}

/// Values bounded away from the kinks of ReLU and |·|.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    random_tensor(rng, shape).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

/// Folds a grid into a scalar through a fixed random weighting.
fn project(g: &mut Graph<f64>, x: Var, weights: &Tensor<f64>) -> Result<Var, TensorError> {
    let w = g.constant(weights.clone());
    let m = g.mul(x, w)?;
    g.sum(m)
}

struct Case {
    name: &'static str,
    shape: Vec<usize>,
    store: ParamStore<f64>,
    build: Box<Build<'static>>,
}

fn grid_shape(rng: &mut impl Rng) -> (usize, usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4))
}

fn unary(name: &'static str, rng: &mut ChaCha8Rng, op: fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>) -> Case {
    let (h, w, c) = grid_shape(rng);
    let mut store = ParamStore::new();
    let x = store.add("x", away_from_zero(rng, &[h, w, c]));
    let proj = random_tensor(rng, &[h, w, c]);
    Case {
        name,
        shape: vec![h, w, c],
        store,
        build: Box::new(move |g, s| {
            let xv = g.param(s, x);
            let y = op(g, xv)?;
            project(g, y, &proj)
        }),
    }
}

fn binary(name: &'static str, rng: &mut ChaCha8Rng, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var, TensorError>) -> Case {
    let (h, w, c) = grid_shape(rng);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor(rng, &[h, w, c]));
    let b = store.add("b", random_tensor(rng, &[h, w, c]));
    let proj = random_tensor(rng, &[h, w, c]);
    Case {
        name,
        shape: vec![h, w, c],
        store,
        build: Box::new(move |g, s| {
            let (av, bv) = (g.param(s, a), g.param(s, b));
            let y = op(g, av, bv)?;
            project(g, y, &proj)
        }),
    }
}

fn loss_case(name: &'static str, rng: &mut ChaCha8Rng, l1: bool, reduction: Reduction) -> Case {
    let (h, w, c) = grid_shape(rng);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor(rng, &[h, w, c]));
    // keep |a - b| away from the kink of the absolute value
    let b = store.add("b", store.get(a).value.clone());
    let offset = away_from_zero(rng, &[h, w, c]);
    for (bv, o) in store.get_mut(b).value.data_mut().iter_mut().zip(offset.data()) {
        *bv += o;
    }
    Case {
        name,
        shape: vec![h, w, c],
        store,
        build: Box::new(move |g, s| {
            let (av, bv) = (g.param(s, a), g.param(s, b));
            if l1 {
                g.mae(av, bv, reduction)
            } else {
                g.mse(av, bv, reduction)
            }
        }),
    }
}

fn tiny_bev(rng: &mut impl Rng) -> BevConfig {
    let h = rng.random_range(3..=5) as f64;
    let w = rng.random_range(3..=5) as f64;
    BevConfig {
        x_min: 0.0,
        x_max: h,
        y_min: -w / 2.0,
        y_max: w / 2.0,
        cell: 1.0,
        lidar_channels: rng.random_range(3..=5),
        camera_channels: rng.random_range(2..=3),
        ..BevConfig::default()
    }
}

fn random_boxes(rng: &mut impl Rng, bev: &BevConfig) -> Vec<Box3D> {
    let classes = [ClassLabel::Car, ClassLabel::Pedestrian, ClassLabel::Cyclist];
    (0..rng.random_range(1..=2))
        .map(|i| Box3D {
            center: [rng.random_range(bev.x_min + 0.3..bev.x_max - 0.3), rng.random_range(bev.y_min + 0.3..bev.y_max - 0.3), -1.0],
            dims: [rng.random_range(0.6..3.0), rng.random_range(0.5..1.5), 1.5],
            yaw: rng.random_range(-3.0..3.0),
            class_label: classes[i % 3].clone(),
        })
        .collect()
}

/// Full detector: encoder, fusion, head, ψ, detection loss and mimic loss.
fn detector_case(name: &'static str, rng: &mut ChaCha8Rng, kind: Option<FusionKind>, kinds: SimLoss) -> Case {
    let bev = tiny_bev(rng);
    let fusion = kind.map(|kind| FusionConfig { kind, depth: rng.random_range(1..=3), hidden: Some(4), camera_adapter: rng.random_bool(0.5) });
    let mut cfg = NetConfig { bev: bev.clone(), fusion, ..NetConfig::default() };
    cfg.head.hidden = 4;
    cfg.encoder.dilations = vec![1, 2];
    let net = Network::new(cfg, rng.random()).expect("valid tiny config");
    // Zero biases put dead cells exactly on the ReLU kink; jitter every
    // parameter off it.
    let mut store = net.params.cast::<f64>();
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let (h, w) = (bev.height(), bev.width());
    let pillars = random_tensor(rng, &[h, w, PILLAR_CHANNELS]).map(f64::abs);
    let camera = random_tensor(rng, &[h, w, bev.camera_channels]);
    let f_star = random_tensor(rng, &[h, w, bev.lidar_channels]).map(|v| v + 2.0);
    let target = build_targets(&random_boxes(rng, &bev), &bev, &net.config.head);
    let lambda = rng.random_range(0.5..1.5);
    Case {
        name,
        shape: vec![h, w, PILLAR_CHANNELS],
        store,
        build: Box::new(move |g, s| {
            let x = g.constant(pillars.clone());
            let c = net.is_fusion().then(|| g.constant(camera.clone()));
            let fw = net.forward(g, s, x, c)?;
            let dl = detection_loss(g.value(fw.head), &target, &net.config.head);
            let det = g.scalar_op(&[fw.head], dl.total, vec![dl.grad])?;
            match fw.psi {
                Some(p) => {
                    let fs = g.constant(f_star.clone());
                    let sl = sim_loss(g, p, fs, kinds, Reduction::Mean)?;
                    let sl = g.scale(sl, lambda)?;
                    g.add(det, sl)
                }
                None => Ok(det),
            }
        }),
    }
}

const CHECKS: &[&str] = &[
    "conv1x1",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "concat_channels",
    "slice_channels",
    "neighborhood",
    "mse_mean",
    "mse_sum",
    "mae_mean",
    "mae_sum",
    "detection_loss",
    "lidar_detector",
    "sum_fusion_l2",
    "concat_fusion_l1",
    "deep_fusion_l2",
    "deep_fusion_l1",
];

pub fn check_names() -> &'static [&'static str] {
    CHECKS
}

fn make_case(name: &'static str, rng: &mut ChaCha8Rng) -> Case {
    match name {
        "conv1x1" => {
            let (h, w, c) = grid_shape(rng);
            let cout = rng.random_range(1..=4);
            let mut store = ParamStore::new();
            let x = store.add("x", random_tensor(rng, &[h, w, c]));
            let wt = store.add("w", random_tensor(rng, &[c, cout]));
            let b = store.add("b", random_tensor(rng, &[cout]));
            let proj = random_tensor(rng, &[h, w, cout]);
            Case {
                name,
                shape: vec![h, w, c],
                store,
                build: Box::new(move |g, s| {
                    let (xv, wv, bv) = (g.param(s, x), g.param(s, wt), g.param(s, b));
                    let y = g.conv1x1(xv, wv, bv)?;
                    project(g, y, &proj)
                }),
            }
        }
        "relu" => unary(name, rng, |g, x| g.relu(x)),
        "sigmoid" => unary(name, rng, |g, x| g.sigmoid(x)),
        "add" => binary(name, rng, |g, a, b| g.add(a, b)),
        "mul" => binary(name, rng, |g, a, b| g.mul(a, b)),
        "scale" => unary(name, rng, |g, x| g.scale(x, -1.7)),
        "concat_channels" => {
            let (h, w, c) = grid_shape(rng);
            let c2 = rng.random_range(1..=3);
            let mut store = ParamStore::new();
            let a = store.add("a", random_tensor(rng, &[h, w, c]));
            let b = store.add("b", random_tensor(rng, &[h, w, c2]));
            let proj = random_tensor(rng, &[h, w, c + c2]);
            Case {
                name,
                shape: vec![h, w, c],
                store,
                build: Box::new(move |g, s| {
                    let (av, bv) = (g.param(s, a), g.param(s, b));
                    let y = g.concat_channels(av, bv)?;
                    project(g, y, &proj)
                }),
            }
        }
        "slice_channels" => {
            let (h, w, c) = grid_shape(rng);
            let start = rng.random_range(0..c);
            let len = rng.random_range(1..=c - start);
            let mut store = ParamStore::new();
            let x = store.add("x", random_tensor(rng, &[h, w, c]));
            let proj = random_tensor(rng, &[h, w, len]);
            Case {
                name,
                shape: vec![h, w, c],
                store,
                build: Box::new(move |g, s| {
                    let xv = g.param(s, x);
                    let y = g.slice_channels(xv, start, len)?;
                    project(g, y, &proj)
                }),
            }
        }
        "neighborhood" => {
            let (h, w, c) = grid_shape(rng);
            let (r, d) = (rng.random_range(0..=2), rng.random_range(1..=3));
            let taps = (2 * r + 1) * (2 * r + 1);
            let mut store = ParamStore::new();
            let x = store.add("x", random_tensor(rng, &[h, w, c]));
            let proj = random_tensor(rng, &[h, w, c * taps]);
            Case {
                name,
                shape: vec![h, w, c],
                store,
                build: Box::new(move |g, s| {
                    let xv = g.param(s, x);
                    let y = g.neighborhood(xv, r, d)?;
                    project(g, y, &proj)
                }),
            }
        }
        "mse_mean" => loss_case(name, rng, false, Reduction::Mean),
        "mse_sum" => loss_case(name, rng, false, Reduction::Sum),
        "mae_mean" => loss_case(name, rng, true, Reduction::Mean),
        "mae_sum" => loss_case(name, rng, true, Reduction::Sum),
        "detection_loss" => {
            let bev = tiny_bev(rng);
            let head = crate::model::HeadConfig::default();
            let target = build_targets(&random_boxes(rng, &bev), &bev, &head);
            let (h, w) = (bev.height(), bev.width());
            let mut store = ParamStore::new();
            // regression channels kept away from their targets
            let mut pred = random_tensor(rng, &[h, w, head.out_channels()]).map(|v| 3.0 * v);
            let k = crate::model::HEAD_CLASSES.len();
            for cell in 0..h * w {
                for j in 0..crate::model::REG_CHANNELS {
                    let t = f64::from(target.regression.data()[cell * crate::model::REG_CHANNELS + j]);
                    let v = &mut pred.data_mut()[cell * head.out_channels() + k + j];
                    if (*v - t).abs() < 0.05 {
                        *v = t + 0.1;
                    }
                }
            }
            let p = store.add("pred", pred);
            Case {
                name,
                shape: vec![h, w, head.out_channels()],
                store,
                build: Box::new(move |g, s| {
                    let pv = g.param(s, p);
                    let dl = detection_loss(g.value(pv), &target, &head);
                    g.scalar_op(&[pv], dl.total, vec![dl.grad])
                }),
            }
        }
        "lidar_detector" => detector_case(name, rng, None, SimLoss::L2),
        "sum_fusion_l2" => detector_case(name, rng, Some(FusionKind::Sum), SimLoss::L2),
        "concat_fusion_l1" => detector_case(name, rng, Some(FusionKind::Concat), SimLoss::L1),
        "deep_fusion_l2" => detector_case(name, rng, Some(FusionKind::Deep), SimLoss::L2),
        "deep_fusion_l1" => detector_case(name, rng, Some(FusionKind::Deep), SimLoss::L1),
        other => unreachable!("unknown check {other}"),
    }
}

/// Runs `cfg.cases` random instances of every check.
pub fn run_suite(cfg: &GradCheckConfig, exec: Exec) -> Result<Vec<CheckResult>, TensorError> {
    let jobs: Vec<(&'static str, usize)> = CHECKS.iter().flat_map(|&n| (0..cfg.cases).map(move |c| (n, c))).collect();
    par::try_map(exec, &jobs, |&(name, case)| {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, format!("{name}/{case}").as_bytes()));
        let c = make_case(name, &mut rng);
        let (max_rel_error, coords) = check_graph(&c.store, c.build.as_ref(), cfg, &mut rng)?;
        Ok(CheckResult { name: c.name.to_string(), case, shape: c.shape, max_rel_error, coords })
    })
}
