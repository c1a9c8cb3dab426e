//! Anchor-free single-scale head: per-class objectness logits plus six
//! regression channels per cell.
//!
//! Regression channels: center offset (dx, dy) from the cell center in cell
//! units, log(l / prior l), log(w / prior w), sin 2θ, cos 2θ. The doubled
//! angle makes θ and θ + π (the same footprint) one target.

use serde::{Deserialize, Serialize};

use crate::geometry::{Box3D, ClassLabel};
use crate::metrics::{nms, ScoredBox};
use crate::tensor::{Scalar, Tensor};

use super::BevConfig;

/// Classes predicted by the head, in channel order.
pub const HEAD_CLASSES: [ClassLabel; 3] = ClassLabel::STANDARD;
pub const REG_CHANNELS: usize = 6;

/// Mean (l, w, h) per class; the anchor sizes dims are regressed against.
pub fn class_prior(class: &ClassLabel) -> [f64; 3] {
    match class {
        ClassLabel::Car => [4.0, 1.8, 1.5],
        ClassLabel::Pedestrian => [0.8, 0.6, 1.75],
        ClassLabel::Cyclist => [1.8, 0.6, 1.7],
        ClassLabel::Other(_) => [1.0, 1.0, 1.0],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden width of the head.
    pub hidden: usize,
    /// Initial objectness bias (logit).
    pub objectness_bias: f64,
    /// Gaussian radius of the soft objectness target, in cells.
    pub sigma_cells: f64,
    /// Ground height in the sensor frame; decoded boxes rest on it.
    pub ground_z: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub objectness_weight: f64,
    pub regression_weight: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            objectness_bias: -6.0,
            sigma_cells: 1.0,
            ground_z: -1.73,
            score_threshold: 0.1,
            nms_iou: 0.1,
            max_detections: 50,
            objectness_weight: 1.0,
            regression_weight: 2.0,
        }
    }
}

impl HeadConfig {
    pub fn out_channels(&self) -> usize {
        HEAD_CLASSES.len() + REG_CHANNELS
    }
}

/// Dense training target for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTarget {
    /// `[H, W, classes]` soft objectness in [0, 1].
    pub objectness: Tensor<f32>,
    /// `[H, W, 6]`, meaningful only where `positive` is set.
    pub regression: Tensor<f32>,
    /// Cells holding an object center.
    pub positive: Vec<bool>,
}

impl DetectionTarget {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|p| **p).count()
    }
}

fn class_slot(class: &ClassLabel) -> Option<usize> {
    HEAD_CLASSES.iter().position(|c| c == class)
}

/// Regression encoding of `b` relative to the center of cell (r, c).
fn encode_box(b: &Box3D, bev: &BevConfig, r: usize, c: usize) -> [f64; REG_CHANNELS] {
    let (cx, cy) = bev.cell_center(r, c);
    let prior = class_prior(&b.class_label);
    let (s2, c2) = (2.0 * b.yaw).sin_cos();
    [
        (b.center[0] - cx) / bev.cell,
        (b.center[1] - cy) / bev.cell,
        (b.dims[0] / prior[0]).ln(),
        (b.dims[1] / prior[1]).ln(),
        s2,
        c2,
    ]
}

/// Gaussian objectness around each box center (1.0 at the center cell) and
/// regression targets at center cells. Boxes outside the grid or of other
/// classes are ignored.
pub fn build_targets(boxes: &[Box3D], bev: &BevConfig, head: &HeadConfig) -> DetectionTarget {
    let (h, w, k) = (bev.height(), bev.width(), HEAD_CLASSES.len());
    let mut objectness = Tensor::grid(h, w, k);
    let mut regression = Tensor::grid(h, w, REG_CHANNELS);
    let mut positive = vec![false; h * w];
    let reach = (3.0 * head.sigma_cells).ceil() as isize;
    for b in boxes {
        let Some(slot) = class_slot(&b.class_label) else { continue };
        let Some((r0, c0)) = bev.cell_of(b.center[0], b.center[1]) else { continue };
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (r, c) = (r0 as isize + dr, c0 as isize + dc);
                if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
                    continue;
                }
                let (r, c) = (r as usize, c as usize);
                let v = if (r, c) == (r0, c0) {
                    1.0
                } else {
                    let (x, y) = bev.cell_center(r, c);
                    let d2 = ((x - b.center[0]).powi(2) + (y - b.center[1]).powi(2)) / (bev.cell * bev.cell);
                    (-d2 / (2.0 * head.sigma_cells * head.sigma_cells)).exp()
                };
                if f64::from(objectness.get3(r, c, slot)) < v {
                    objectness.set3(r, c, slot, v as f32);
                }
            }
        }
        for (ch, v) in encode_box(b, bev, r0, c0).into_iter().enumerate() {
            regression.set3(r0, c0, ch, v as f32);
        }
        positive[r0 * w + c0] = true;
    }
    DetectionTarget { objectness, regression, positive }
}

/// Value, gradient with respect to the head output, and the two terms.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLoss<T> {
    pub total: T,
    pub objectness: T,
    pub regression: T,
    pub grad: Tensor<T>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn binary_entropy(t: f64) -> f64 {
    let h = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    h(t) + h(1.0 - t)
}

/// Objectness BCE summed over cells and classes plus L1 regression summed
/// over positive cells, both divided by max(1, #positives) and weighted.
/// The BCE is offset by the soft targets' entropy, so a perfect prediction
/// scores 0. `pred` is the raw head output `[H, W, classes + 6]` (logits first).

pub fn detection_loss<T: Scalar>(pred: &Tensor<T>, target: &DetectionTarget, head: &HeadConfig) -> DetectionLoss<T> {
    let k = HEAD_CLASSES.len();
    let ch = k + REG_CHANNELS;
    let norm = target.num_positive().max(1) as f64;
    let (wo, wr) = (head.objectness_weight / norm, head.regression_weight / norm);
    let mut grad = vec![T::zero(); pred.len()];
    let (mut bce, mut l1) = (0.0, 0.0);
    let p = pred.data();
    let (to, tr) = (target.objectness.data(), target.regression.data());
    for cell in 0..target.positive.len() {
        for j in 0..k {
            let x = p[cell * ch + j].as_f64();
            let t = f64::from(to[cell * k + j]);
            // minus the target entropy: zero at p = t, same gradient
            bce += softplus(x) - x * t - binary_entropy(t);
            grad[cell * ch + j] = T::from_f64(wo * (sigmoid(x) - t));
        }
        if target.positive[cell] {
            for j in 0..REG_CHANNELS {
                let d = p[cell * ch + k + j].as_f64() - f64::from(tr[cell * REG_CHANNELS + j]);
                l1 += d.abs();
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad[cell * ch + k + j] = T::from_f64(wr * s);
            }
        }
    }
    let objectness = head.objectness_weight * bce / norm;
    let regression = head.regression_weight * l1 / norm;
    DetectionLoss {
        total: T::from_f64(objectness + regression),
        objectness: T::from_f64(objectness),
        regression: T::from_f64(regression),
        grad: Tensor::from_vec(pred.shape(), grad).expect("same shape as pred"),
    }
}

/// Peaks (3×3 local maxima above the score threshold) decoded into boxes,
/// then greedy NMS and a cap on the count.
pub fn decode(pred: &Tensor<f32>, bev: &BevConfig, head: &HeadConfig) -> Vec<ScoredBox> {
    let (h, w, ch) = pred.dims3();
    let k = HEAD_CLASSES.len();
    assert_eq!(ch, k + REG_CHANNELS, "head output channel count");
    let logit_thr = (head.score_threshold / (1.0 - head.score_threshold)).ln();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            for (slot, class) in HEAD_CLASSES.iter().enumerate() {
                let x = f64::from(pred.get3(r, c, slot));
                if x < logit_thr {
                    continue;
                }
                let is_peak = (-1isize..=1).all(|dr| {
                    (-1isize..=1).all(|dc| {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr as usize >= h || cc as usize >= w {
                            return true;
                        }
                        f64::from(pred.get3(rr as usize, cc as usize, slot)) <= x
                    })
                });
                if !is_peak {
                    continue;
                }
                let reg: Vec<f64> = (0..REG_CHANNELS).map(|j| f64::from(pred.get3(r, c, k + j))).collect();
                let (cx, cy) = bev.cell_center(r, c);
                let prior = class_prior(class);
                let dims = [prior[0] * reg[2].clamp(-3.0, 3.0).exp(), prior[1] * reg[3].clamp(-3.0, 3.0).exp(), prior[2]];
                let yaw = reg[4].atan2(reg[5]) / 2.0;
                let center = [cx + reg[0] * bev.cell, cy + reg[1] * bev.cell, head.ground_z + prior[2] / 2.0];
                let bbox = Box3D::new(center, dims, yaw, class.clone()).expect("decoded dims are positive");
                out.push(ScoredBox { bbox, score: sigmoid(x) });
            }
        }
    }
    let mut kept = nms(out, head.nms_iou);
    kept.truncate(head.max_detections);
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn small_bev() -> BevConfig {
        BevConfig { x_min: 0.0, x_max: 8.0, y_min: -4.0, y_max: 4.0, cell: 1.0, ..BevConfig::default() }
    }

    /// Logits that reproduce `t` exactly at positive cells and are strongly negative elsewhere.
    fn perfect_pred(t: &DetectionTarget) -> Tensor<f32> {
        let (h, w, k) = t.objectness.dims3();
        let mut p = Tensor::grid(h, w, k + REG_CHANNELS);
        for r in 0..h {
            for c in 0..w {
                for j in 0..k {
                    let v = t.objectness.get3(r, c, j);
                    p.set3(r, c, j, if v == 1.0 { 12.0 } else { -12.0 });
                }
                for j in 0..REG_CHANNELS {
                    p.set3(r, c, k + j, t.regression.get3(r, c, j));
                }
            }
        }
        p
    }

    #[test]
    fn decode_recovers_box() {
        let bev = small_bev();
        let head = HeadConfig::default();
        for yaw in [0.0, 0.4, 1.3, 2.9, 4.0] {
            let gt = Box3D::new([3.5, 0.5, -1.0], [4.2, 1.7, 1.5], yaw, ClassLabel::Car).unwrap();
            let t = build_targets(&[gt.clone()], &bev, &head);
            assert_eq!(t.num_positive(), 1);
            let dets = decode(&perfect_pred(&t), &bev, &head);
            assert_eq!(dets.len(), 1);
            let d = &dets[0].bbox;
            assert!((d.center[0] - 3.5).abs() <= 0.5 && (d.center[1] - 0.5).abs() <= 0.5);
            let dyaw = (d.yaw - gt.yaw).rem_euclid(PI);
            assert!(dyaw.min(PI - dyaw) < 1e-3, "yaw {yaw}: decoded {}", d.yaw);
            assert!((d.dims[0] - 4.2).abs() < 1e-5);
        }
    }

    #[test]
    fn hand_decoded_single_cell() {
        let bev = small_bev();
        let head = HeadConfig::default();
        let mut p = Tensor::full(&[8, 8, 9], -10.0f32);
        // cell (2, 5): center (2.5, 1.5); offset (0.25, -0.5) cells; dims = prior; yaw 0
        for (j, v) in [8.0f32, 0.25, -0.5, 0.0, 0.0, 0.0, 1.0].iter().enumerate() {
            p.set3(2, 5, if j == 0 { 0 } else { 2 + j }, *v);
        }
        let d = decode(&p, &bev, &head);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox.class_label, ClassLabel::Pedestrian);
        assert_eq!(d[0].bbox.center, [2.75, 1.0, -1.73 + 1.75 / 2.0]);
        assert_eq!(d[0].bbox.dims, [0.8, 0.6, 1.75]);
        assert!(decode(&Tensor::full(&[8, 8, 9], -10.0), &bev, &head).is_empty());
    }

    #[test]
    fn loss_vanishes_at_target_and_background() {
        let bev = small_bev();
        let head = HeadConfig::default();
        let gt = Box3D::new([3.2, 0.1, -1.0], [4.0, 1.8, 1.5], 0.3, ClassLabel::Car).unwrap();
        let t = build_targets(&[gt], &bev, &head);
        // exact soft targets as probabilities: loss is the entropy floor only
        let mut p = perfect_pred(&t);
        for r in 0..8 {
            for c in 0..8 {
                for j in 0..3 {
                    let q = f64::from(t.objectness.get3(r, c, j));
                    let logit = if q == 0.0 { -40.0 } else if q == 1.0 { 40.0 } else { (q / (1.0 - q)).ln() };
                    p.set3(r, c, j, logit as f32);
                }
            }
        }
        let l = detection_loss(&p.cast::<f64>(), &t, &head);
        assert!(l.objectness.abs() < 1e-5, "{}", l.objectness);
        assert!(l.regression.abs() < 1e-6);

        let empty = build_targets(&[], &bev, &head);
        let l = detection_loss(&Tensor::<f64>::full(&[8, 8, 9], 0.7), &empty, &head);
        assert_eq!(l.regression, 0.0);
    }

    #[test]
    fn two_cell_hand_case() {
        // 1×2 grid, classes 3; cell 0 positive for class 0 with regression target zeros
        let t = DetectionTarget {
            objectness: Tensor::from_vec(&[1, 2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
            regression: Tensor::grid(1, 2, REG_CHANNELS),
            positive: vec![true, false],
        };
        let mut pred = vec![0.0f64; 18];
        pred[3] = 0.5; // dx of cell 0
        pred[7] = -0.25; // sin of cell 0
        pred[9 + 3] = 9.0; // cell 1 regression is unsupervised
        let l = detection_loss(&Tensor::from_vec(&[1, 2, 9], pred).unwrap(), &t, &HeadConfig::default());
        // six logits at 0: softplus(0) = ln 2 each, target term only for the positive one (x = 0)
        let bce = 6.0 * 2f64.ln();
        assert!((l.objectness - bce).abs() < 1e-12);
        assert!((l.regression - 2.0 * 0.75).abs() < 1e-12);
        assert!((l.grad.data()[0] - (0.5 - 1.0)).abs() < 1e-12);
        assert_eq!(l.grad.data()[3], 2.0);
        assert_eq!(l.grad.data()[7], -2.0);
        assert_eq!(l.grad.data()[12], 0.0);
    }
}
