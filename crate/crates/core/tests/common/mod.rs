//! Shared fixtures for integration tests: a brute-force precision/recall
//! oracle for AP and small random detection instances.

#![allow(dead_code)]

use ovdet::detector::Detection;
use ovdet::evaluation::GroundTruth;
use ovdet::regions::Bbox;
use ovdet::synthworld::ClassInfo;
use rand::{Rng, RngCore};

fn overlap(a: &Bbox, b: &Bbox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let area = |r: &Bbox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

/// Stable rank: confidence descending, input order among ties.
fn rank(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::with_capacity(dets.len());
    for i in 0..dets.len() {
        let pos = order
            .iter()
            .position(|&j| dets[j].confidence < dets[i].confidence)
            .unwrap_or(order.len());
        order.insert(pos, i);
    }
    order
}

/// True positives among the first `k` ranked detections, matching greedily
/// to the highest-IoU unmatched ground truth of the same image.
fn true_positives(
    dets: &[Detection],
    gts: &[GroundTruth],
    order: &[usize],
    k: usize,
    t: f64,
) -> usize {
    let mut taken = vec![false; gts.len()];
    let mut hits = 0;
    for &i in &order[..k] {
        let d = &dets[i];
        let mut best: Option<usize> = None;
        let mut best_iou = f64::NEG_INFINITY;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.image_id != d.image_id {
                continue;
            }
            let o = overlap(&d.bbox, &gt.bbox);
            if o >= t && o > best_iou {
                best = Some(g);
                best_iou = o;
            }
        }
        if let Some(g) = best {
            taken[g] = true;
            hits += 1;
        }
    }
    hits
}

/// All-point interpolated AP of one class, recomputing every point of the
/// precision/recall curve from scratch.
pub fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], t: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let order = rank(dets);
    let n = order.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    for k in 1..=n {
        let tp = true_positives(dets, gts, &order, k, t);
        precision.push(tp as f64 / k as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..n {
        let p = precision[k..]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        ap += (recall[k] - prev) * p;
        prev = recall[k];
    }
    ap
}

pub fn thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Per-threshold AP of class `c` over a mixed-class instance.
pub fn oracle_class_curve(dets: &[Detection], gts: &[GroundTruth], c: usize) -> Vec<f64> {
    let cd: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
    let cg: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).copied().collect();
    thresholds()
        .into_iter()
        .map(|t| oracle_ap(&cd, &cg, t))
        .collect()
}

pub struct ApInstance {
    pub classes: Vec<ClassInfo>,
    pub detections: Vec<Detection>,
    pub ground_truths: Vec<GroundTruth>,
}

fn random_bbox(rng: &mut impl RngCore) -> Bbox {
    let x = rng.random_range(0.0..20.0);
    let y = rng.random_range(0.0..20.0);
    Bbox::new(
        x,
        y,
        x + rng.random_range(2.0..12.0),
        y + rng.random_range(2.0..12.0),
    )
    .unwrap()
}

/// At most 10 detections, 5 ground truths and 3 classes over two images.
/// Detections often jitter a ground truth and confidences repeat to
/// exercise tie handling.
pub fn random_instance(rng: &mut impl RngCore) -> ApInstance {
    let n_classes = rng.random_range(1..=3);
    let classes = (0..n_classes)
        .map(|id| ClassInfo {
            id,
            name: format!("c{id}"),
            tokens: vec![id + 2],
            novel: id == 2,
        })
        .collect();
    let ground_truths: Vec<GroundTruth> = (0..rng.random_range(0..=5))
        .map(|_| GroundTruth {
            image_id: rng.random_range(0..2),
            bbox: random_bbox(rng),
            class_id: rng.random_range(0..n_classes),
        })
        .collect();
    let detections = (0..rng.random_range(0..=10))
        .map(|_| {
            let (image_id, bbox, class_id) = match ground_truths.get(rng.random_range(0..8)) {
                Some(g) if rng.random_bool(0.7) => {
                    let s = |rng: &mut dyn RngCore| rng.random_range(-1.5..1.5);
                    let b = Bbox::new(
                        g.bbox.x1 + s(rng),
                        g.bbox.y1 + s(rng),
                        g.bbox.x2 + s(rng),
                        g.bbox.y2 + s(rng),
                    )
                    .unwrap_or(g.bbox);
                    (g.image_id, b, g.class_id)
                }
                _ => (
                    rng.random_range(0..2),
                    random_bbox(rng),
                    rng.random_range(0..n_classes),
                ),
            };
            Detection {
                image_id,
                bbox,
                class_id,
                confidence: rng.random_range(1..=5) as f64 / 5.0,
            }
        })
        .collect();
    ApInstance {
        classes,
        detections,
        ground_truths,
    }
}
