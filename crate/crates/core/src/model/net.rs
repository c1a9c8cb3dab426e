//! Network blocks. Parameters live in a [`ParamStore`]; blocks only hold
//! handles, so the same structure runs in `f32` for training and `f64` for
//! gradient checks (`store.cast()`).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

use super::{BevConfig, HeadConfig, ModelError, PILLAR_CHANNELS};

/// A 1×1 convolution's weight and bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[cin, cout], cin, 1.0, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, cin, cout }
    }

    /// Identity weight, zero bias.
    pub fn identity<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        let mut w = Tensor::zeros(&[c, c]);
        for i in 0..c {
            w.data_mut()[i * c + i] = T::one();
        }
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c]));
        Self { w, b, cin: c, cout: c }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv1x1(x, w, b)
    }
}

/// Spatial context of the encoder. Each layer gathers the `(2r+1)²` cells
/// at its dilation before its 1×1 map; `radius = 0` gives a pure per-cell MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub radius: usize,
    /// One entry per layer.
    pub dilations: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { radius: 1, dilations: vec![1, 2, 4] }
    }
}

fn taps(radius: usize) -> usize {
    (2 * radius + 1) * (2 * radius + 1)
}

/// Pillar grid → `C_l` features: gather + 1×1 + ReLU per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarEncoder {
    layers: Vec<(Conv, usize)>,
    radius: usize,
}

impl LidarEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, out: usize, rng: &mut impl Rng) -> Self {
        let mut cin = PILLAR_CHANNELS;
        let layers = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let conv = Conv::new(store, &format!("{prefix}.l{i}"), cin * taps(cfg.radius), out, rng);
                cin = out;
                (conv, d)
            })
            .collect();
        Self { layers, radius: cfg.radius }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var, TensorError> {
        for (conv, dilation) in &self.layers {
            if self.radius > 0 {
                x = g.neighborhood(x, self.radius, *dilation)?;
            }
            x = conv.apply(g, store, x)?;
            x = g.relu(x)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Sum,
    Concat,
    #[default]
    Deep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub kind: FusionKind,
    /// Stacked MLP blocks in the 2D3D learner.
    pub depth: usize,
    /// Block width; `None` means `C_l + C_c`.
    pub hidden: Option<usize>,
    /// Trainable 1×1 adapter on the camera grid.
    pub camera_adapter: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { kind: FusionKind::Deep, depth: 3, hidden: None, camera_adapter: false }
    }
}

/// The three interchangeable LiDAR–camera fusion modules.
#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    /// `f_l + conv(f_c)`
    Sum { cam: Conv },
    /// `conv(concat(f_l, f_c))`
    Concat { proj: Conv },
    /// 3D learner `g = conv(f_l)`, K blocks over `concat(g, f_c)`, projection
    /// `p` and sigmoid gate `w` from the last block; output `f_l + w ⊙ p`.
    Deep { learner3d: Conv, blocks: Vec<Conv>, proj: Conv, gate: Conv },
}

impl Fusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &FusionConfig, cl: usize, cc: usize, rng: &mut impl Rng) -> Result<Self, ModelError> {
        Ok(match cfg.kind {
            FusionKind::Sum => Fusion::Sum { cam: Conv::new(store, "fuse.cam", cc, cl, rng) },
            FusionKind::Concat => Fusion::Concat { proj: Conv::new(store, "fuse.proj", cl + cc, cl, rng) },
            FusionKind::Deep => {
                if cfg.depth == 0 {
                    return Err(ModelError::Config("fusion depth must be at least 1".into()));
                }
                let hidden = cfg.hidden.unwrap_or(cl + cc);
                let learner3d = Conv::new(store, "fuse.l3d", cl, cl, rng);
                let mut cin = cl + cc;
                let blocks = (0..cfg.depth)
                    .map(|i| {
                        let c = Conv::new(store, &format!("fuse.block{i}"), cin, hidden, rng);
                        cin = hidden;
                        c
                    })
                    .collect();
                let proj = Conv::new(store, "fuse.proj", hidden, cl, rng);
                let gate = Conv::new(store, "fuse.gate", hidden, cl, rng);
                Fusion::Deep { learner3d, blocks, proj, gate }
            }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f_l: Var, f_c: Var) -> Result<Var, TensorError> {
        match self {
            Fusion::Sum { cam } => {
                let c = cam.apply(g, store, f_c)?;
                g.add(f_l, c)
            }
            Fusion::Concat { proj } => {
                let h = g.concat_channels(f_l, f_c)?;
                proj.apply(g, store, h)
            }
            Fusion::Deep { learner3d, blocks, proj, gate } => {
                let l = learner3d.apply(g, store, f_l)?;
                let mut h = g.concat_channels(l, f_c)?;
                for b in blocks {
                    h = b.apply(g, store, h)?;
                    h = g.relu(h)?;
                }
                let p = proj.apply(g, store, h)?;
                let w = gate.apply(g, store, h)?;
                let w = g.sigmoid(w)?;
                let wp = g.mul(w, p)?;
                g.add(f_l, wp)
            }
        }
    }
}

/// Everything needed to rebuild a [`Network`]'s structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub bev: BevConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// `None` builds a LiDAR-only detector (the assistant).
    pub fusion: Option<FusionConfig>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { bev: BevConfig::default(), encoder: EncoderConfig::default(), head: HeadConfig::default(), fusion: None }
    }
}

/// Feature extractor: LiDAR encoder plus, for fusion models, the camera
/// adapter and fusion module. Handles only; parameters live in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub encoder: LidarEncoder,
    pub adapter: Option<Conv>,
    pub fusion: Option<Fusion>,
}

impl Trunk {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &NetConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.bev.validate()?;
        if config.encoder.dilations.is_empty() {
            return Err(ModelError::Config("encoder needs at least one layer".into()));
        }
        let (cl, cc) = (config.bev.lidar_channels, config.bev.camera_channels);
        let encoder = LidarEncoder::new(store, "enc", &config.encoder, cl, rng);
        let (adapter, fusion) = match &config.fusion {
            Some(f) => (f.camera_adapter.then(|| Conv::identity(store, "cam.adapter", cc)), Some(Fusion::new(store, f, cl, cc, rng)?)),
            None => (None, None),
        };
        Ok(Self { encoder, adapter, fusion })
    }

    /// Returns `(f_l, f_lc)`; `f_lc = f_l` without fusion.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pillars: Var, camera: Option<Var>) -> Result<(Var, Var), TensorError> {
        let f_l = self.encoder.forward(g, store, pillars)?;
        let f_lc = match (&self.fusion, camera) {
            (Some(fusion), Some(cam)) => {
                let cam = match &self.adapter {
                    Some(a) => a.apply(g, store, cam)?,
                    None => cam,
                };
                fusion.forward(g, store, f_l, cam)?
            }
            (Some(_), None) => panic!("fusion network needs a camera grid"),
            (None, _) => f_l,
        };
        Ok((f_l, f_lc))
    }
}

/// Handles of a detector's blocks plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetConfig,
    pub params: ParamStore<f32>,
    pub trunk: Trunk,
    pub head_hidden: Conv,
    pub head_out: Conv,
    /// Projection applied before the feature-mimic loss (fusion models only).
    pub psi: Option<Conv>,
}

/// Named nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub f_l: Var,
    /// Fused feature, or `f_l` for a LiDAR-only network.
    pub f_lc: Var,
    pub head: Var,
    pub psi: Option<Var>,
}

impl Network {
    /// Builds and initializes a network; identical seeds give identical parameters.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let trunk = Trunk::new(&mut params, &config, &mut rng)?;
        let cl = config.bev.lidar_channels;
        let psi = config.fusion.as_ref().map(|_| Conv::identity(&mut params, "psi", cl));
        let hh = config.head.hidden;
        let head_hidden = Conv::new(&mut params, "head.hidden", cl * 9, hh, &mut rng);
        let head_out = Conv::new(&mut params, "head.out", hh, config.head.out_channels(), &mut rng);
        // start with low objectness everywhere
        let bias = params.get_mut(head_out.b).value.data_mut();
        for v in bias.iter_mut().take(super::HEAD_CLASSES.len()) {
            *v = config.head.objectness_bias as f32;
        }
        Ok(Self { config, params, trunk, head_hidden, head_out, psi })
    }

    pub fn is_fusion(&self) -> bool {
        self.trunk.fusion.is_some()
    }

    /// Builds the graph: trunk, head, ψ.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pillars: Var, camera: Option<Var>) -> Result<Forward, TensorError> {
        let (f_l, f_lc) = self.trunk.forward(g, store, pillars, camera)?;
        let head = self.head_forward(g, store, f_lc)?;
        let psi = match &self.psi {
            Some(p) => Some(p.apply(g, store, f_lc)?),
            None => None,
        };
        Ok(Forward { f_l, f_lc, head, psi })
    }

    pub fn head_forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var, TensorError> {
        let x = g.neighborhood(f, 1, 1)?;
        let x = self.head_hidden.apply(g, store, x)?;
        let x = g.relu(x)?;
        self.head_out.apply(g, store, x)
    }

    /// Inference in `f32`: raw head output and the fused feature.
    pub fn infer(&self, pillars: &Tensor<f32>, camera: Option<&Tensor<f32>>) -> Result<(Tensor<f32>, Tensor<f32>), TensorError> {
        let mut g = Graph::with_exec(crate::par::Exec::Seq);
        let x = g.constant(pillars.clone());
        let c = camera.map(|c| g.constant(c.clone()));
        let out = self.forward(&mut g, &self.params, x, c)?;
        Ok((g.value(out.head).clone(), g.value(out.f_lc).clone()))
    }

    /// Copies parameter values by name from `records`; every parameter must be present with its shape.
    pub fn load_values(&mut self, records: &[(String, Tensor<f32>)]) -> Result<(), ModelError> {
        for p in self.params.iter_mut() {
            let (_, t) = records
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(ModelError::Checkpoint(format!("parameter {} has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape())));
            }
            p.value = t.clone();
        }
        if records.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!("{} records for {} parameters", records.len(), self.params.len())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bev() -> BevConfig {
        BevConfig { x_min: 0.0, x_max: 4.0, y_min: -2.0, y_max: 2.0, cell: 1.0, lidar_channels: 5, camera_channels: 3, ..BevConfig::default() }
    }

    fn rand_grid(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn encoder_zero_in_zero_out() {
        let mut store = ParamStore::<f32>::new();
        let enc = LidarEncoder::new(&mut store, "e", &EncoderConfig::default(), 6, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let x = g.constant(Tensor::grid(4, 4, PILLAR_CHANNELS));
        let y = enc.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 4, 6]);
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn closed_gate_is_residual_identity() {
        let mut store = ParamStore::<f64>::new();
        let cfg = FusionConfig::default();
        let fusion = Fusion::new(&mut store, &cfg, 5, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let Fusion::Deep { gate, blocks, .. } = &fusion else { panic!("default is deep") };
        assert_eq!(blocks.len(), 3);
        store.get_mut(gate.w).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(gate.b).value.data_mut().iter_mut().for_each(|v| *v = -800.0);
        let mut g = Graph::new();
        let fl = rand_grid(4, 4, 5, 3).cast::<f64>();
        let a = g.constant(fl.clone());
        let c = g.constant(rand_grid(4, 4, 3, 4).cast());
        let out = fusion.forward(&mut g, &store, a, c).unwrap();
        assert_eq!(g.value(out), &fl);

        // large negative gate bias: within sigmoid tail of f_l
        store.get_mut(gate.b).value.data_mut().iter_mut().for_each(|v| *v = -30.0);
        let mut g = Graph::new();
        let a = g.constant(fl.clone());
        let c = g.constant(Tensor::zeros(&[4, 4, 3]));
        let out = fusion.forward(&mut g, &store, a, c).unwrap();
        let diff = g.value(out).data().iter().zip(fl.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6 * 10.0);
    }

    #[test]
    fn all_fusion_kinds_keep_shape() {
        for kind in [FusionKind::Sum, FusionKind::Concat, FusionKind::Deep] {
            let cfg = NetConfig { bev: tiny_bev(), fusion: Some(FusionConfig { kind, ..FusionConfig::default() }), ..NetConfig::default() };
            let net = Network::new(cfg, 7).unwrap();
            let (head, f) = net.infer(&rand_grid(4, 4, 4, 1).map(f32::abs), Some(&rand_grid(4, 4, 3, 2))).unwrap();
            assert_eq!(f.shape(), &[4, 4, 5]);
            assert_eq!(head.shape(), &[4, 4, 9]);
        }
    }

    #[test]
    fn sum_with_zero_camera_adds_bias_only() {
        let mut store = ParamStore::<f32>::new();
        let fusion = Fusion::new(&mut store, &FusionConfig { kind: FusionKind::Sum, ..FusionConfig::default() }, 5, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let Fusion::Sum { cam } = &fusion else { unreachable!() };
        store.get_mut(cam.b).value = Tensor::full(&[5], 0.5);
        let mut g = Graph::new();
        let fl = rand_grid(2, 2, 5, 9);
        let a = g.constant(fl.clone());
        let c = g.constant(Tensor::zeros(&[2, 2, 3]));
        let out = fusion.forward(&mut g, &store, a, c).unwrap();
        assert_eq!(g.value(out), &fl.map(|v| v + 0.5));
    }

    #[test]
    fn psi_starts_as_identity_and_seeds_reproduce() {
        let cfg = NetConfig { bev: tiny_bev(), fusion: Some(FusionConfig::default()), ..NetConfig::default() };
        let net = Network::new(cfg.clone(), 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_grid(4, 4, 5, 5));
        let y = net.psi.unwrap().apply(&mut g, &net.params, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert_eq!(Network::new(cfg.clone(), 3).unwrap(), net);
        assert_ne!(Network::new(cfg, 4).unwrap().params, net.params);
        assert!(Network::new(NetConfig { fusion: Some(FusionConfig { depth: 0, ..FusionConfig::default() }), ..NetConfig::default() }, 0).is_err());
    }
}
