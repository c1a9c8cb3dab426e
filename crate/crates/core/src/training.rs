//! Two-phase training: an assistant detector on enhanced scenes, then a
//! fusion detector on raw scenes whose fused feature is pulled towards the
//! frozen assistant's feature.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::fingerprint::{hash_of, sub_seed, TOOL_VERSION};
use crate::geometry::Box3D;
use crate::metrics::{self, EvalConfig, EvalReport, MetricsError, ScoredBox};
use crate::model::{bev_encode, build_targets, decode, detection_loss, DetectionTarget, ModelError, NetConfig, Network, Trunk};
use crate::par::{self, Exec};
use crate::scene::Scene;
use crate::tensor::{read_container, write_container, Container, Graph, ParamStore, Reduction, Sgd, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimLoss {
    #[default]
    L2,
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the feature-mimic term.
    pub lambda: f64,
    pub sim_loss: SimLoss,
    pub reduction: Reduction,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub clip_norm: Option<f64>,
    /// Scenes per update; gradients are averaged.
    pub batch: usize,
    pub seed: u64,
    /// Compute every f* once before training instead of per step.
    pub cache_features: bool,
    /// Evaluate on the validation set after every epoch, not only the last.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            sim_loss: SimLoss::L2,
            reduction: Reduction::Mean,
            epochs: 10,
            lr: 0.005,
            momentum: 0.9,
            clip_norm: Some(10.0),
            batch: 2,
            seed: 0,
            cache_features: true,
            eval_every_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be > 0 and momentum in [0, 1)");
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("clip_norm must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrainError {
    #[error("training diverged: non-finite value ({op}) at epoch {epoch}, frame {frame}")]
    DivergedLoss { epoch: usize, frame: String, op: &'static str },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// A frame encoded for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub frame_id: String,
    pub boxes: Vec<Box3D>,
    /// Pillars of the network input (every point of `Sample::scene`).
    pub pillars: Tensor<f32>,
    pub camera: Option<Tensor<f32>>,
    pub target: DetectionTarget,
    /// Pillars of the enhanced scene, fed to the assistant.
    pub enhanced: Option<Tensor<f32>>,
}

pub fn prepare(sample: &Sample, enhanced: Option<&Scene>, net: &NetConfig) -> Prepared {
    Prepared {
        frame_id: sample.frame_id.clone(),
        boxes: sample.boxes.clone(),
        pillars: bev_encode(&sample.scene.all_points(), &net.bev),
        camera: sample.camera.clone(),
        target: build_targets(&sample.boxes, &net.bev, &net.head),
        enhanced: enhanced.map(|s| bev_encode(&s.all_points(), &net.bev)),
    }
}

/// `enhanced`, when given, pairs with `samples` by position.
pub fn prepare_all(samples: &[Sample], enhanced: Option<&[Scene]>, net: &NetConfig, exec: Exec) -> Vec<Prepared> {
    par::map_range(exec, samples.len(), |i| prepare(&samples[i], enhanced.map(|e| &e[i]), net))
}

/// Same frames with the enhanced scene as the network input.
pub fn enhanced_view(items: &[Prepared]) -> Result<Vec<Prepared>, TrainError> {
    items
        .iter()
        .map(|p| {
            let e = p.enhanced.clone().ok_or_else(|| TrainError::Config(format!("frame {} has no enhanced scene", p.frame_id)))?;
            Ok(Prepared { pillars: e.clone(), enhanced: Some(e), ..p.clone() })
        })
        .collect()
}

/// Feature-mimic loss between ψ(f_lc) and f*: squared or absolute
/// deviation, averaged or summed over every element.
pub fn sim_loss<T: crate::tensor::Scalar>(g: &mut Graph<T>, psi_out: Var, f_star: Var, kind: SimLoss, reduction: Reduction) -> Result<Var, TensorError> {
    match kind {
        SimLoss::L2 => g.mse(psi_out, f_star, reduction),
        SimLoss::L1 => g.mae(psi_out, f_star, reduction),
    }
}

/// Frozen feature extractor of a trained assistant. The detection head is
/// dropped; for an LC-style assistant the fusion trunk is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct AssistantSnapshot {
    config: NetConfig,
    params: ParamStore<f32>,
    trunk: Trunk,
    bev_fingerprint: String,
}

impl AssistantSnapshot {
    pub fn from_network(net: &Network) -> Result<Self, ModelError> {
        let mut params = ParamStore::new();
        // structure only; every value is overwritten below
        let trunk = Trunk::new(&mut params, &net.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        for p in params.iter_mut() {
            let id = net.params.find(&p.name).ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {}", p.name)))?;
            p.value = net.params.get(id).value.clone();
        }
        Ok(Self { config: net.config.clone(), params, trunk, bev_fingerprint: net.config.bev.fingerprint() })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn bev_fingerprint(&self) -> &str {
        &self.bev_fingerprint
    }

    pub fn uses_camera(&self) -> bool {
        self.trunk.fusion.is_some()
    }

    pub fn check(&self, bev: &crate::model::BevConfig) -> Result<(), TrainError> {
        let fp = bev.fingerprint();
        if fp != self.bev_fingerprint {
            return Err(TrainError::ConfigMismatch(format!("assistant BEV fingerprint {} differs from {fp}", self.bev_fingerprint)));
        }
        Ok(())
    }

    /// f* for one enhanced frame. No gradient can reach the snapshot: it
    /// owns its parameters and never runs a backward pass.
    pub fn high_quality_features(&self, pillars: &Tensor<f32>, camera: Option<&Tensor<f32>>, bev: &crate::model::BevConfig) -> Result<Tensor<f32>, TrainError> {
        self.check(bev)?;
        if self.uses_camera() && camera.is_none() {
            return Err(TrainError::Config("camera-fusion assistant needs camera grids".into()));
        }
        let mut g = Graph::with_exec(Exec::Seq);
        let x = g.constant(pillars.clone());
        let c = camera.filter(|_| self.uses_camera()).map(|c| g.constant(c.clone()));
        let (_, f) = self.trunk.forward(&mut g, &self.params, x, c)?;
        Ok(g.value(f).clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::json!({
            "kind": "assistant_snapshot",
            "tool_version": TOOL_VERSION,
            "config_hash": hash_of(&self.config),
            "bev_fingerprint": self.bev_fingerprint,
            "net": self.config,
        });
        let records = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        write_container(&Container { meta: meta.to_string(), records })
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean detection loss over the epoch's scenes.
    pub det_loss: f64,
    /// Mean feature-mimic loss; absent without an assistant.
    pub sim_loss: Option<f64>,
    /// Overall validation mAP@R40, when evaluated.
    pub map: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch\tL_det\tL_sim\tmAP";

impl EpochLog {
    pub fn tsv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        format!("{}\t{:.6}\t{}\t{}", self.epoch, self.det_loss, opt(self.sim_loss), opt(self.map))
    }
}

pub fn log_tsv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for l in log {
        s += &l.tsv_line();
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<EpochLog>,
    /// Validation report after the last epoch (absent with no validation frames).
    pub report: Option<EvalReport>,
}

/// Per-frame detections and the AP report.
pub fn evaluate_network(net: &Network, items: &[Prepared], eval: &EvalConfig, exec: Exec) -> Result<(EvalReport, Vec<Vec<ScoredBox>>), TrainError> {
    if net.is_fusion() && items.iter().any(|p| p.camera.is_none()) {
        return Err(TrainError::Config("fusion network needs camera grids".into()));
    }
    let dets = par::try_map(exec, items, |p| -> Result<Vec<ScoredBox>, TensorError> {
        let (head, _) = net.infer(&p.pillars, p.camera.as_ref().filter(|_| net.is_fusion()))?;
        Ok(decode(&head, &net.config.bev, &net.config.head))
    })?;
    let gts: Vec<Vec<Box3D>> = items.iter().map(|p| p.boxes.clone()).collect();
    let report = metrics::evaluate(&dets, &gts, eval, exec)?;
    Ok((report, dets))
}

enum Teacher<'a> {
    None,
    Live(&'a AssistantSnapshot),
    Cached(Vec<Tensor<f32>>),
}

pub struct StepLoss {
    pub det: f64,
    pub sim: Option<f64>,
}

/// Forward + backward for one frame; parameter gradients are added into `net.params`.
pub fn accumulate(net: &mut Network, item: &Prepared, f_star: Option<Tensor<f32>>, cfg: &TrainConfig, exec: Exec) -> Result<StepLoss, TensorError> {
    let mut g = Graph::with_exec(exec);
    let x = g.constant(item.pillars.clone());
    let cam = if net.is_fusion() {
        Some(g.constant(item.camera.clone().expect("checked before training")))
    } else {
        None
    };
    let fw = net.forward(&mut g, &net.params, x, cam)?;
    let dl = detection_loss(g.value(fw.head), &item.target, &net.config.head);
    let det = g.scalar_op(&[fw.head], dl.total, vec![dl.grad])?;
    let mut total = det;
    let mut sim = None;
    if let (Some(psi), Some(fs)) = (fw.psi, f_star) {
        let fs = g.constant(fs);
        let s = sim_loss(&mut g, psi, fs, cfg.sim_loss, cfg.reduction)?;
        sim = Some(f64::from(g.value(s).item()));
        if cfg.lambda > 0.0 {
            let ws = g.scale(s, cfg.lambda as f32)?;
            total = g.add(det, ws)?;
        }
    }
    g.backward(total, &mut net.params)?;
    Ok(StepLoss { det: f64::from(dl.total), sim })
}

fn teacher_features(teacher: &Teacher, i: usize, item: &Prepared, bev: &crate::model::BevConfig) -> Result<Option<Tensor<f32>>, TrainError> {
    match teacher {
        Teacher::None => Ok(None),
        Teacher::Cached(fs) => Ok(Some(fs[i].clone())),
        Teacher::Live(s) => {
            let e = item.enhanced.as_ref().ok_or_else(|| TrainError::Config(format!("frame {} has no enhanced scene", item.frame_id)))?;
            Ok(Some(s.high_quality_features(e, item.camera.as_ref(), bev)?))
        }
    }
}

fn run(mut net: Network, train: &[Prepared], val: &[Prepared], teacher: Teacher, cfg: &TrainConfig, eval: &EvalConfig, exec: Exec) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("no training frames".into()));
    }
    if net.is_fusion() && train.iter().chain(val).any(|p| p.camera.is_none()) {
        return Err(TrainError::Config("fusion network needs camera grids".into()));
    }
    let mut opt = Sgd::new(cfg.lr as f32, cfg.momentum as f32).with_clip(cfg.clip_norm.map(|c| c as f32));
    net.params.zero_grads();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut report = None;
    let bev = net.config.bev.clone();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, format!("epoch/{epoch}").as_bytes())));
        let (mut det_sum, mut sim_sum, mut pending) = (0.0, 0.0, 0usize);
        let mut has_sim = false;
        for (n, &i) in order.iter().enumerate() {
            let item = &train[i];
            let fs = teacher_features(&teacher, i, item, &bev)?;
            let step = accumulate(&mut net, item, fs, cfg, exec).map_err(|e| match e {
                TensorError::NonFinite(op) => TrainError::DivergedLoss { epoch, frame: item.frame_id.clone(), op },
                other => TrainError::Tensor(other),
            })?;
            det_sum += step.det;
            if let Some(s) = step.sim {
                sim_sum += s;
                has_sim = true;
            }
            pending += 1;
            if pending == cfg.batch || n + 1 == order.len() {
                net.params.scale_grads(1.0 / pending as f32);
                opt.step(&mut net.params);
                if net.params.iter().any(|p| !p.value.all_finite()) {
                    return Err(TrainError::DivergedLoss { epoch, frame: item.frame_id.clone(), op: "sgd" });
                }
                net.params.zero_grads();
                pending = 0;
            }
        }
        let last = epoch + 1 == cfg.epochs;
        let map = if !val.is_empty() && (cfg.eval_every_epoch || last) {
            let (r, _) = evaluate_network(&net, val, eval, exec)?;
            let m = r.overall;
            if last {
                report = Some(r);
            }
            Some(m)
        } else {
            None
        };
        let count = train.len() as f64;
        let entry = EpochLog { epoch, det_loss: det_sum / count, sim_loss: has_sim.then(|| sim_sum / count), map };
        log::info!("{}", entry.tsv_line());
        log.push(entry);
    }
    Ok(TrainOutcome { network: net, log, report })
}

/// Trains a detector on `train` as given: enhanced frames for the assistant,
/// raw frames for the sparse baseline.
pub fn train_detector(net_cfg: &NetConfig, train: &[Prepared], val: &[Prepared], cfg: &TrainConfig, eval: &EvalConfig, exec: Exec) -> Result<TrainOutcome, TrainError> {
    let net = Network::new(net_cfg.clone(), sub_seed(cfg.seed, b"init"))?;
    run(net, train, val, Teacher::None, cfg, eval, exec)
}

/// Trains the assistant on the enhanced view of each frame and returns it
/// with its frozen snapshot.
pub fn train_assistant(
    net_cfg: &NetConfig,
    train: &[Prepared],
    val: &[Prepared],
    cfg: &TrainConfig,
    eval: &EvalConfig,
    exec: Exec,
) -> Result<(TrainOutcome, AssistantSnapshot), TrainError> {
    let (train, val) = (enhanced_view(train)?, enhanced_view(val)?);
    let out = train_detector(net_cfg, &train, &val, cfg, eval, exec)?;
    let snap = AssistantSnapshot::from_network(&out.network)?;
    Ok((out, snap))
}

/// Trains a fusion detector on raw frames with the mimic loss towards
/// `snapshot`'s features of the matching enhanced frames.
pub fn train_fusion(
    net_cfg: &NetConfig,
    train: &[Prepared],
    val: &[Prepared],
    snapshot: &AssistantSnapshot,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    exec: Exec,
) -> Result<TrainOutcome, TrainError> {
    if net_cfg.fusion.is_none() {
        return Err(TrainError::Config("train_fusion needs a fusion configuration".into()));
    }
    snapshot.check(&net_cfg.bev)?;
    if snapshot.config.bev.lidar_channels != net_cfg.bev.lidar_channels {
        return Err(TrainError::ConfigMismatch("assistant and student feature widths differ".into()));
    }
    let teacher = if cfg.cache_features {
        let fs = par::try_map(exec, train, |p| {
            let e = p.enhanced.as_ref().ok_or_else(|| TrainError::Config(format!("frame {} has no enhanced scene", p.frame_id)))?;
            snapshot.high_quality_features(e, p.camera.as_ref(), &net_cfg.bev)
        })?;
        Teacher::Cached(fs)
    } else {
        Teacher::Live(snapshot)
    };
    let net = Network::new(net_cfg.clone(), sub_seed(cfg.seed, b"init"))?;
    run(net, train, val, teacher, cfg, eval, exec)
}

/// Metadata stored in a detector checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub tool_version: String,
    pub config_hash: String,
    pub bev_fingerprint: String,
    pub net: NetConfig,
    pub train: Option<TrainConfig>,
    pub log: Vec<EpochLog>,
    pub metrics: Option<EvalReport>,
}

impl CheckpointMeta {
    pub fn new(net: &NetConfig, train: Option<&TrainConfig>, log: Vec<EpochLog>, metrics: Option<EvalReport>) -> Self {
        Self {
            kind: "detector".into(),
            tool_version: TOOL_VERSION.into(),
            config_hash: hash_of(&(net, train)),
            bev_fingerprint: net.bev.fingerprint(),
            net: net.clone(),
            train: train.cloned(),
            log,
            metrics,
        }
    }
}

pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta) -> Vec<u8> {
    let meta = serde_json::to_string(meta).expect("metadata serializes");
    let records = net.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    write_container(&Container { meta, records })
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(Network, CheckpointMeta), TrainError> {
    let c = read_container(bytes).map_err(ModelError::from)?;
    let meta: CheckpointMeta = serde_json::from_str(&c.meta).map_err(|e| ModelError::Checkpoint(format!("metadata: {e}")))?;
    if meta.kind != "detector" {
        return Err(ModelError::Checkpoint(format!("expected a detector checkpoint, found {}", meta.kind)).into());
    }
    if meta.bev_fingerprint != meta.net.bev.fingerprint() {
        return Err(TrainError::ConfigMismatch("checkpoint fingerprint does not match its BEV config".into()));
    }
    let mut net = Network::new(meta.net.clone(), 0)?;
    net.load_values(&c.records)?;
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize, Split};
    use crate::model::{BevConfig, FusionConfig, FusionKind};
    use crate::simulator::SimConfig;

    fn tiny_net(fusion: Option<FusionConfig>) -> NetConfig {
        let bev = BevConfig { x_min: 0.0, x_max: 12.0, y_min: -6.0, y_max: 6.0, lidar_channels: 8, camera_channels: 4, ..BevConfig::default() };
        NetConfig { bev, fusion, ..NetConfig::default() }
    }

    fn tiny_sim(n: usize) -> SimConfig {
        SimConfig { train_scenes: n, val_scenes: 1, objects_min: 1, objects_max: 2, clutter_max: 0, place_x: [4.0, 10.0], place_y: [-4.0, 4.0], ..SimConfig::default() }
    }

    /// Raw frames with a fake enhancement: the raw scene scanned again with
    /// every object's points doubled.
    fn frames(net: &NetConfig, n: usize, split: Split) -> Vec<Prepared> {
        let samples = synthesize(&tiny_sim(n), &net.bev, split, Exec::Seq).unwrap();
        let enhanced: Vec<Scene> = samples
            .iter()
            .map(|s| Scene { added: s.scene.objects.iter().map(|o| crate::scene::AddedPoints { points: o.points.clone() }).collect(), ..s.scene.clone() })
            .collect();
        prepare_all(&samples, Some(&enhanced), net, Exec::Seq)
    }

    fn short(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, ..TrainConfig::default() }
    }

    #[test]
    fn sim_loss_hand_values() {
        for (kind, want) in [(SimLoss::L2, 4.0), (SimLoss::L1, 2.0)] {
            let mut g = Graph::<f64>::new();
            let a = g.constant(Tensor::from_vec(&[1, 1, 1], vec![3.0]).unwrap());
            let b = g.constant(Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap());
            let s = sim_loss(&mut g, a, b, kind, Reduction::Mean).unwrap();
            assert_eq!(g.value(s).item(), want);
            let z = sim_loss(&mut g, a, a, kind, Reduction::Mean).unwrap();
            assert_eq!(g.value(z).item(), 0.0);
        }
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 1, 2]));
        let b = g.constant(Tensor::zeros(&[1, 1, 3]));
        assert!(matches!(sim_loss(&mut g, a, b, SimLoss::L2, Reduction::Mean), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::default().lambda, 1.0);
        assert!(TrainConfig { lambda: -0.1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn detection_loss_drops_on_one_scene() {
        let net = tiny_net(None);
        let train = frames(&net, 1, Split::Train);
        let cfg = TrainConfig { epochs: 150, batch: 1, lr: 0.02, ..TrainConfig::default() };
        let out = train_detector(&net, &train, &[], &cfg, &EvalConfig::default(), Exec::Seq).unwrap();
        let (first, last) = (out.log[0].det_loss, out.log.last().unwrap().det_loss);
        assert!(last <= 0.1 * first, "L_det {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let net = tiny_net(None);
        let train = frames(&net, 3, Split::Train);
        let val = frames(&net, 3, Split::Val);
        let a = train_detector(&net, &train, &val, &short(2), &EvalConfig::default(), Exec::Seq).unwrap();
        let b = train_detector(&net, &train, &val, &short(2), &EvalConfig::default(), Exec::Seq).unwrap();
        assert_eq!(a, b);
        let meta = CheckpointMeta::new(&net, Some(&short(2)), a.log.clone(), a.report.clone());
        assert_eq!(save_checkpoint(&a.network, &meta), save_checkpoint(&b.network, &meta));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = tiny_net(Some(FusionConfig::default()));
        let n = Network::new(net.clone(), 5).unwrap();
        let meta = CheckpointMeta::new(&net, None, vec![], None);
        let bytes = save_checkpoint(&n, &meta);
        let (back, m) = load_checkpoint(&bytes).unwrap();
        assert_eq!(back, n);
        assert_eq!(m, meta);
        assert!(load_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn snapshot_drops_head_and_checks_fingerprint() {
        let net = tiny_net(None);
        let n = Network::new(net.clone(), 1).unwrap();
        let snap = AssistantSnapshot::from_network(&n).unwrap();
        assert!(snap.params().iter().all(|p| p.name.starts_with("enc.")));
        let item = &frames(&net, 1, Split::Train)[0];
        let f1 = snap.high_quality_features(&item.pillars, None, &net.bev).unwrap();
        let f2 = snap.high_quality_features(&item.pillars, None, &net.bev).unwrap();
        assert_eq!(f1, f2);
        assert!(f1.all_finite());
        let (_, f_direct) = n.infer(&item.pillars, None).unwrap();
        assert_eq!(f1, f_direct);

        let other = BevConfig { cell: 0.25, ..net.bev.clone() };
        assert!(matches!(snap.high_quality_features(&item.pillars, None, &other), Err(TrainError::ConfigMismatch(_))));
        let student = NetConfig { bev: other, fusion: Some(FusionConfig::default()), ..net };
        let r = train_fusion(&student, &[], &[], &snap, &short(1), &EvalConfig::default(), Exec::Seq);
        assert!(matches!(r, Err(TrainError::ConfigMismatch(_))));
    }

    #[test]
    fn fusion_keeps_snapshot_frozen_and_logs_sim() {
        let net = tiny_net(None);
        let train = frames(&net, 2, Split::Train);
        let (_, snap) = train_assistant(&net, &train, &[], &short(1), &EvalConfig::default(), Exec::Seq).unwrap();
        let before = snap.clone();
        let student = NetConfig { fusion: Some(FusionConfig::default()), ..net.clone() };
        let out = train_fusion(&student, &train, &[], &snap, &TrainConfig { cache_features: false, ..short(2) }, &EvalConfig::default(), Exec::Seq).unwrap();
        assert_eq!(snap, before);
        assert!(out.log.iter().all(|l| l.sim_loss.is_some_and(f64::is_finite)));
        let cached = train_fusion(&student, &train, &[], &snap, &TrainConfig { cache_features: true, ..short(2) }, &EvalConfig::default(), Exec::Seq).unwrap();
        assert_eq!(cached, out);
    }

    #[test]
    fn zero_lambda_gradients_equal_detection_only() {
        let net = tiny_net(None);
        let item = frames(&net, 1, Split::Train).remove(0);
        let snap = AssistantSnapshot::from_network(&Network::new(net.clone(), 9).unwrap()).unwrap();
        let fs = snap.high_quality_features(item.enhanced.as_ref().unwrap(), None, &net.bev).unwrap();
        for kind in [FusionKind::Sum, FusionKind::Concat, FusionKind::Deep] {
            let student = NetConfig { fusion: Some(FusionConfig { kind, ..FusionConfig::default() }), ..net.clone() };
            let cfg = TrainConfig { lambda: 0.0, ..TrainConfig::default() };
            let mut a = Network::new(student.clone(), 2).unwrap();
            let mut b = a.clone();
            let la = accumulate(&mut a, &item, Some(fs.clone()), &cfg, Exec::Seq).unwrap();
            let lb = accumulate(&mut b, &item, None, &cfg, Exec::Seq).unwrap();
            assert!(la.sim.unwrap() > 0.0);
            assert_eq!(la.det, lb.det);
            assert_eq!(a.params, b.params);
            // and the mimic term does move ψ when switched on
            let mut c = Network::new(student, 2).unwrap();
            accumulate(&mut c, &item, Some(fs.clone()), &TrainConfig::default(), Exec::Seq).unwrap();
            let psi = c.psi.unwrap().w;
            assert_ne!(c.params.get(psi).grad, a.params.get(psi).grad);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let net = tiny_net(None);
        let train = frames(&net, 2, Split::Train);
        let cfg = TrainConfig { lr: 1e30, clip_norm: None, momentum: 0.0, epochs: 3, ..TrainConfig::default() };
        let r = train_detector(&net, &train, &[], &cfg, &EvalConfig::default(), Exec::Seq);
        assert!(matches!(r, Err(TrainError::DivergedLoss { .. })), "{r:?}");
    }

    #[test]
    fn log_lines() {
        let l = EpochLog { epoch: 3, det_loss: 1.5, sim_loss: None, map: Some(0.25) };
        assert_eq!(l.tsv_line(), "3\t1.500000\t-\t0.250000");
        assert!(log_tsv(&[l]).starts_with("epoch\tL_det\tL_sim\tmAP\n"));
    }
}
