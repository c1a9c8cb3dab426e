//! Rotated-box BEV IoU and AP over 40 recall levels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{Box3D, ClassLabel};
use crate::par::{self, Exec};

/// Intersections smaller than this (m²) count as empty.
pub const AREA_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no classes to average")]
    NoClasses,
    #[error("line {line}: {reason}")]
    MalformedDump { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: Box3D,
    pub score: f64,
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let [x0, y0] = poly[i];
            let [x1, y1] = poly[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    twice.abs() / 2.0
}

/// Clips `subject` by the convex counter-clockwise polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        // signed area test: >= 0 means left of (or on) edge a→b, i.e. inside
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the overlap of two BEV footprints.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let inter = polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()));
    if inter < AREA_EPS {
        0.0
    } else {
        inter
    }
}

/// Intersection over union of the two footprints in the xy-plane.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.dims[0] * a.dims[1] + b.dims[0] * b.dims[1] - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn by_score_desc(a: &ScoredBox, b: &ScoredBox) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score)
}

/// Greedy suppression: keeps boxes in descending score, dropping any whose
/// IoU with an already kept box exceeds `iou_thr`.
pub fn nms(mut boxes: Vec<ScoredBox>, iou_thr: f64) -> Vec<ScoredBox> {
    boxes.sort_by(by_score_desc);
    let mut kept: Vec<ScoredBox> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| bev_iou(&k.bbox, &b.bbox) <= iou_thr) {
            kept.push(b);
        }
    }
    kept
}

/// Matches one frame: detections in descending score each take the unmatched
/// ground truth of highest IoU (lowest index on ties) if it reaches `thr`.
/// Returns (score, is_true_positive) per detection.
pub fn match_frame(dets: &[ScoredBox], gts: &[Box3D], thr: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<&ScoredBox> = dets.iter().collect();
    order.sort_by(|a, b| by_score_desc(a, b));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = bev_iou(&d.bbox, gt);
                if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (d.score, best.is_some())
        })
        .collect()
}

/// Interpolated precision at recall 1/40, …, 40/40, averaged.
pub fn ap_from_matches(mut matches: Vec<(f64, bool)>, num_gt: usize) -> f64 {
    if num_gt == 0 || matches.is_empty() {
        return 0.0;
    }
    matches.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(matches.len());
    for (i, (_, hit)) in matches.iter().enumerate() {
        tp += usize::from(*hit);
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // suffix max of precision gives the max-precision-at-recall>=r envelope
    let mut envelope = vec![0.0; curve.len()];
    let mut best: f64 = 0.0;
    for i in (0..curve.len()).rev() {
        best = best.max(curve[i].1);
        envelope[i] = best;
    }
    let mut sum = 0.0;
    for k in 1..=40 {
        let r = k as f64 / 40.0;
        if let Some(i) = curve.iter().position(|(rec, _)| *rec >= r - 1e-12) {
            sum += envelope[i];
        }
    }
    sum / 40.0
}

/// AP@R40 for one class. `detections[f]` and `ground_truth[f]` belong to frame `f`.
pub fn ap_r40(detections: &[Vec<ScoredBox>], ground_truth: &[Vec<Box3D>], iou_threshold: f64) -> f64 {
    ap_r40_with(detections, ground_truth, iou_threshold, Exec::Seq)
}

pub fn ap_r40_with(detections: &[Vec<ScoredBox>], ground_truth: &[Vec<Box3D>], iou_threshold: f64, exec: Exec) -> f64 {
    assert_eq!(detections.len(), ground_truth.len(), "one detection list per frame");
    let per_frame = par::map_range(exec, detections.len(), |f| match_frame(&detections[f], &ground_truth[f], iou_threshold));
    let num_gt = ground_truth.iter().map(Vec::len).sum();
    ap_from_matches(per_frame.into_iter().flatten().collect(), num_gt)
}

/// Unweighted mean of per-class APs.
pub fn map_overall(aps: &[f64]) -> Result<f64, MetricsError> {
    if aps.is_empty() {
        return Err(MetricsError::NoClasses);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_car: f64,
    pub iou_pedestrian: f64,
    pub iou_cyclist: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_car: 0.7, iou_pedestrian: 0.5, iou_cyclist: 0.5 }
    }
}

impl EvalConfig {
    pub fn threshold(&self, class: &ClassLabel) -> f64 {
        match class {
            ClassLabel::Car => self.iou_car,
            ClassLabel::Pedestrian => self.iou_pedestrian,
            ClassLabel::Cyclist | ClassLabel::Other(_) => self.iou_cyclist,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub overall: f64,
}

impl EvalReport {
    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:>8} {:>6} {:>6}\n", "class", "AP@R40", "gt", "det");
        for c in &self.classes {
            s += &format!("{:<12} {:>8.2} {:>6} {:>6}\n", c.class, 100.0 * c.ap, c.num_gt, c.num_det);
        }
        s += &format!("{:<12} {:>8.2}\n", "overall", 100.0 * self.overall);
        s
    }
}

/// Per-class AP over every class that has ground truth, plus their mean.
pub fn evaluate(
    detections: &[Vec<ScoredBox>],
    ground_truth: &[Vec<Box3D>],
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<EvalReport, MetricsError> {
    let mut classes: Vec<ClassLabel> = ground_truth.iter().flatten().map(|b| b.class_label.clone()).collect();
    classes.sort();
    classes.dedup();
    let mut reports = Vec::new();
    for class in classes {
        let dets: Vec<Vec<ScoredBox>> =
            detections.iter().map(|f| f.iter().filter(|d| d.bbox.class_label == class).cloned().collect()).collect();
        let gts: Vec<Vec<Box3D>> =
            ground_truth.iter().map(|f| f.iter().filter(|b| b.class_label == class).cloned().collect()).collect();
        let ap = ap_r40_with(&dets, &gts, cfg.threshold(&class), exec);
        reports.push(ClassReport {
            class: class.name().to_string(),
            ap,
            num_gt: gts.iter().map(Vec::len).sum(),
            num_det: dets.iter().map(Vec::len).sum(),
        });
    }
    let overall = map_overall(&reports.iter().map(|r| r.ap).collect::<Vec<_>>())?;
    Ok(EvalReport { classes: reports, overall })
}

/// One detection per line: `class score x y z l w h yaw`.
pub fn write_dump(dets: &[ScoredBox]) -> String {
    dets.iter()
        .map(|d| {
            let b = &d.bbox;
            format!(
                "{} {} {} {} {} {} {} {} {}\n",
                b.class_label.name(),
                d.score,
                b.center[0],
                b.center[1],
                b.center[2],
                b.dims[0],
                b.dims[1],
                b.dims[2],
                b.yaw
            )
        })
        .collect()
}

pub fn read_dump(text: &str) -> Result<Vec<ScoredBox>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| MetricsError::MalformedDump { line: i + 1, reason };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 9 {
            return Err(bad(format!("expected 9 fields, found {}", f.len())));
        }
        let v = f[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<f64>, _>>()?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(bad("non-finite value".into()));
        }
        let bbox = Box3D::new([v[1], v[2], v[3]], [v[4], v[5], v[6]], v[7], ClassLabel::parse(f[0])).map_err(|e| bad(e.to_string()))?;
        out.push(ScoredBox { bbox, score: v[0] });
    }
    Ok(out)
}

/// Groups per-frame dumps by frame id, for frames listed in `frames`.
pub fn align_dumps(frames: &[String], dumps: &BTreeMap<String, Vec<ScoredBox>>) -> Vec<Vec<ScoredBox>> {
    frames.iter().map(|f| dumps.get(f).cloned().unwrap_or_default()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn bx(x: f64, y: f64, l: f64, w: f64, yaw: f64) -> Box3D {
        Box3D::new([x, y, 0.0], [l, w, 1.0], yaw, ClassLabel::Car).unwrap()
    }

    fn sb(b: Box3D, score: f64) -> ScoredBox {
        ScoredBox { bbox: b, score }
    }

    #[test]
    fn iou_examples() {
        assert!((bev_iou(&bx(0.0, 0.0, 1.0, 1.0, 0.0), &bx(0.5, 0.0, 1.0, 1.0, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert!((bev_iou(&bx(0.0, 0.0, 2.0, 1.0, 0.3), &bx(0.0, 0.0, 2.0, 1.0, 0.3)) - 1.0).abs() < 1e-12);
        assert_eq!(bev_iou(&bx(1.0, 2.0, 2.0, 1.0, 0.0), &bx(1.0, 2.0, 2.0, 1.0, 0.0)), 1.0);
        assert_eq!(bev_iou(&bx(0.0, 0.0, 1.0, 1.0, 0.0), &bx(5.0, 0.0, 1.0, 1.0, 0.0)), 0.0);
        // touching edge: zero-area overlap
        assert_eq!(bev_iou(&bx(0.0, 0.0, 1.0, 1.0, 0.0), &bx(1.0, 0.0, 1.0, 1.0, 0.0)), 0.0);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(vec![], 0.5).is_empty());
        let kept = nms(vec![sb(bx(0.0, 0.0, 4.0, 2.0, 0.0), 0.6), sb(bx(0.2, 0.0, 4.0, 2.0, 0.0), 0.9), sb(bx(9.0, 0.0, 4.0, 2.0, 0.0), 0.1)], 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn ap_examples() {
        let g = bx(0.0, 0.0, 4.0, 2.0, 0.0);
        assert_eq!(ap_r40(&[vec![sb(g.clone(), 0.9)]], &[vec![g.clone()]], 0.7), 1.0);
        assert_eq!(ap_r40(&[vec![]], &[vec![g.clone()]], 0.7), 0.0);
        let g2 = bx(10.0, 0.0, 4.0, 2.0, 0.0);
        assert_eq!(ap_r40(&[vec![sb(g.clone(), 0.9)]], &[vec![g.clone(), g2]], 0.7), 0.5);
        assert_eq!(map_overall(&[1.0, 0.5, 0.0]), Ok(0.5));
        assert_eq!(map_overall(&[0.25]), Ok(0.25));
        assert_eq!(map_overall(&[]), Err(MetricsError::NoClasses));
    }

    #[test]
    fn duplicates_are_false_positives() {
        let g = bx(0.0, 0.0, 4.0, 2.0, 0.0);
        let m = match_frame(&[sb(g.clone(), 0.9), sb(g.clone(), 0.8)], &[g], 0.7);
        assert_eq!(m, vec![(0.9, true), (0.8, false)]);
    }

    #[test]
    fn empty_dump_gives_zero_table() {
        let g = vec![vec![bx(0.0, 0.0, 4.0, 2.0, 0.0)]];
        let r = evaluate(&[vec![]], &g, &EvalConfig::default(), Exec::Seq).unwrap();
        assert_eq!(r.classes.len(), 1);
        assert_eq!(r.overall, 0.0);
        assert!(evaluate(&[vec![]], &[vec![]], &EvalConfig::default(), Exec::Seq).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let d = vec![sb(bx(1.5, -2.25, 4.0, 1.75, 1.0), 0.875), sb(Box3D::new([3.0, 1.0, -1.0], [0.8, 0.6, 1.7], 0.0, ClassLabel::Pedestrian).unwrap(), 0.5)];
        assert_eq!(read_dump(&write_dump(&d)).unwrap(), d);
        assert!(read_dump("Car 1 2 3").is_err());
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (-5.0f64..5.0, -5.0f64..5.0, 0.5f64..4.0, 0.5f64..3.0, 0.0f64..6.3).prop_map(|(x, y, l, w, t)| bx(x, y, l, w, t))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = bev_iou(&a, &b);
            prop_assert!((ab - bev_iou(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_rigid_invariance(a in arb_box(), b in arb_box(), tx in -20.0f64..20.0, ty in -20.0f64..20.0, r in 0.0f64..6.3) {
            let (s, c) = r.sin_cos();
            let mv = |q: &Box3D| {
                let [x, y, z] = q.center;
                Box3D::new([c * x - s * y + tx, s * x + c * y + ty, z], q.dims, q.yaw + r, q.class_label.clone()).unwrap()
            };
            prop_assert!((bev_iou(&a, &b) - bev_iou(&mv(&a), &mv(&b))).abs() < 1e-9);
        }

        #[test]
        fn ap_monotone(n in 1usize..5, seed in 0u64..1000) {
            let gts: Vec<Box3D> = (0..n).map(|i| bx(10.0 * i as f64, 0.0, 4.0, 2.0, 0.0)).collect();
            let mut dets: Vec<ScoredBox> = vec![sb(bx(0.0, 50.0, 4.0, 2.0, 0.0), 0.95)];
            let base = ap_r40(&[dets.clone()], &[gts.clone()], 0.7);
            let k = (seed as usize) % n;
            dets.push(sb(gts[k].clone(), 0.5));
            let with_hit = ap_r40(&[dets.clone()], &[gts.clone()], 0.7);
            prop_assert!(with_hit >= base);
            dets.push(sb(gts[k].clone(), 0.4));
            prop_assert!(ap_r40(&[dets], &[gts], 0.7) <= with_hit);
        }
    }

    #[test]
    fn rotated_square_cases() {
        // unit square vs itself rotated 45°: octagon of area 2(√2 − 1)
        let oct = 2.0 * (2f64.sqrt() - 1.0);
        let iou = bev_iou(&bx(0.0, 0.0, 1.0, 1.0, 0.0), &bx(0.0, 0.0, 1.0, 1.0, FRAC_PI_4));
        assert!((iou - oct / (2.0 - oct)).abs() < 1e-9);
        // 2×1 vs the same rotated 90°: 1×1 overlap, union 3
        let iou = bev_iou(&bx(0.0, 0.0, 2.0, 1.0, 0.0), &bx(0.0, 0.0, 2.0, 1.0, FRAC_PI_2));
        assert!((iou - 1.0 / 3.0).abs() < 1e-9);
    }
}
