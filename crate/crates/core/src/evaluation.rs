//! IoU, per-class average precision and the three-setup report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::{ClassSet, Detection};
use crate::error::{Error, Result};
use crate::regions::Bbox;
use crate::synthworld::ClassInfo;

pub const NUM_IOU_THRESHOLDS: usize = 10;

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub fn iou(a: &Bbox, b: &Bbox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection(b);
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: Bbox,
    pub class_id: usize,
}

/// Detection order used for matching: confidence descending, then input
/// index.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// All-point interpolated AP of one class at one IoU threshold. Detections
/// and ground truths of other classes must already be filtered out.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for i in ranked(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] || gt.image_id != d.image_id {
                continue;
            }
            let o = iou(&d.bbox, &gt.bbox).unwrap_or(0.0);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
        }
        tp.push(best.is_some());
    }
    let n_gt = gts.len() as f64;
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..tp.len() {
        ap += (recall[k] - prev_recall) * precision[k];
        prev_recall = recall[k];
    }
    ap
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setup {
    Novel,
    Known,
    Generalized,
}

impl Setup {
    pub const ALL: [Setup; 3] = [Setup::Novel, Setup::Known, Setup::Generalized];

    pub fn class_set(self) -> ClassSet {
        match self {
            Setup::Novel => ClassSet::Novel,
            Setup::Known => ClassSet::Known,
            Setup::Generalized => ClassSet::All,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Setup::Novel => "novel",
            Setup::Known => "known",
            Setup::Generalized => "generalized",
        }
    }

    pub fn parse(s: &str) -> Option<Setup> {
        Setup::ALL.into_iter().find(|x| x.name() == s)
    }
}

/// Detections of one setup, tagged with the class set they were produced
/// under.
#[derive(Clone, Debug, PartialEq)]
pub struct SetupDetections {
    pub setup: Setup,
    pub class_set: ClassSet,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub novel: bool,
    pub ground_truths: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_threshold: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Class-mean AP at each threshold; `ap` is their mean.
    pub per_threshold: Vec<f64>,
    pub classes_evaluated: usize,
}

impl Summary {
    fn over<'a>(classes: impl Iterator<Item = &'a ClassAp>) -> Summary {
        let scored: Vec<&ClassAp> = classes.filter(|c| c.ground_truths > 0).collect();
        let per_threshold: Vec<f64> = (0..NUM_IOU_THRESHOLDS)
            .map(|t| {
                if scored.is_empty() {
                    0.0
                } else {
                    scored.iter().map(|c| c.per_threshold[t]).sum::<f64>() / scored.len() as f64
                }
            })
            .collect();
        Summary {
            ap: per_threshold.iter().sum::<f64>() / NUM_IOU_THRESHOLDS as f64,
            ap50: per_threshold[0],
            ap75: per_threshold[5],
            per_threshold,
            classes_evaluated: scored.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupBlock {
    pub summary: Summary,
    pub classes: Vec<ClassAp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedBlock {
    pub summary: Summary,
    /// Generalized run restricted to novel / known classes.
    pub novel: Summary,
    pub known: Summary,
    pub classes: Vec<ClassAp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class_id: usize,
    pub name: String,
    pub novel: bool,
    pub individual_ap: f64,
    pub generalized_ap: f64,
    /// `generalized_ap - individual_ap`.
    pub delta: f64,
}

/// Fields serialize in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub novel: Option<SetupBlock>,
    pub known: Option<SetupBlock>,
    pub generalized: Option<GeneralizedBlock>,
    pub delta: Vec<ClassDelta>,
}

fn class_aps(dets: &[Detection], gts: &[GroundTruth], classes: &[&ClassInfo]) -> Vec<ClassAp> {
    let thresholds = iou_thresholds();
    classes
        .iter()
        .map(|c| {
            let cd: Vec<Detection> = dets
                .iter()
                .filter(|d| d.class_id == c.id)
                .cloned()
                .collect();
            let cg: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c.id).copied().collect();
            let per_threshold: Vec<f64> = thresholds
                .iter()
                .map(|&t| average_precision(&cd, &cg, t))
                .collect();
            ClassAp {
                class_id: c.id,
                name: c.name.clone(),
                novel: c.novel,
                ground_truths: cg.len(),
                ap: per_threshold.iter().sum::<f64>() / NUM_IOU_THRESHOLDS as f64,
                ap50: per_threshold[0],
                ap75: per_threshold[5],
                per_threshold,
            }
        })
        .collect()
}

fn members(set: ClassSet, c: &ClassInfo) -> bool {
    match set {
        ClassSet::Known => !c.novel,
        ClassSet::Novel => c.novel,
        ClassSet::All => true,
    }
}

pub fn evaluate(
    runs: &[SetupDetections],
    gts: &[GroundTruth],
    classes: &[ClassInfo],
) -> Result<EvalReport> {
    let mut report = EvalReport {
        novel: None,
        known: None,
        generalized: None,
        delta: Vec::new(),
    };
    for run in runs {
        if run.class_set != run.setup.class_set() {
            return Err(Error::SetupMismatch(format!(
                "{} setup evaluated with {:?} detections",
                run.setup.name(),
                run.class_set
            )));
        }
        let set = run.class_set;
        let in_set: Vec<&ClassInfo> = classes.iter().filter(|c| members(set, c)).collect();
        if let Some(d) = run
            .detections
            .iter()
            .find(|d| !in_set.iter().any(|c| c.id == d.class_id))
        {
            return Err(Error::SetupMismatch(format!(
                "class {} is outside the {} class set",
                d.class_id,
                run.setup.name()
            )));
        }
        let aps = class_aps(&run.detections, gts, &in_set);
        match run.setup {
            Setup::Novel => {
                report.novel = Some(SetupBlock {
                    summary: Summary::over(aps.iter()),
                    classes: aps,
                })
            }
            Setup::Known => {
                report.known = Some(SetupBlock {
                    summary: Summary::over(aps.iter()),
                    classes: aps,
                })
            }
            Setup::Generalized => {
                report.generalized = Some(GeneralizedBlock {
                    summary: Summary::over(aps.iter()),
                    novel: Summary::over(aps.iter().filter(|c| c.novel)),
                    known: Summary::over(aps.iter().filter(|c| !c.novel)),
                    classes: aps,
                })
            }
        }
    }
    if let Some(general) = &report.generalized {
        let individual: BTreeMap<usize, f64> = report
            .novel
            .iter()
            .chain(report.known.iter())
            .flat_map(|b| b.classes.iter().map(|c| (c.class_id, c.ap)))
            .collect();
        report.delta = general
            .classes
            .iter()
            .filter_map(|c| {
                individual.get(&c.class_id).map(|&ind| ClassDelta {
                    class_id: c.class_id,
                    name: c.name.clone(),
                    novel: c.novel,
                    individual_ap: ind,
                    generalized_ap: c.ap,
                    delta: c.ap - ind,
                })
            })
            .collect();
    }
    Ok(report)
}

impl EvalReport {
    pub fn setup_summary(&self, setup: Setup) -> Option<&Summary> {
        match setup {
            Setup::Novel => self.novel.as_ref().map(|b| &b.summary),
            Setup::Known => self.known.as_ref().map(|b| &b.summary),
            Setup::Generalized => self.generalized.as_ref().map(|b| &b.summary),
        }
    }

    /// Per-class table: one row per (setup, class).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setup,class_id,name,novel,ground_truths,ap,ap50,ap75\n");
        let mut rows = |setup: &str, classes: &[ClassAp]| {
            for c in classes {
                let _ = writeln!(
                    out,
                    "{setup},{},{},{},{},{},{},{}",
                    c.class_id, c.name, c.novel, c.ground_truths, c.ap, c.ap50, c.ap75
                );
            }
        };
        if let Some(b) = &self.novel {
            rows("novel", &b.classes);
        }
        if let Some(b) = &self.known {
            rows("known", &b.classes);
        }
        if let Some(b) = &self.generalized {
            rows("generalized", &b.classes);
        }
        out
    }

    pub fn delta_csv(&self) -> String {
        let mut out = String::from("class_id,name,novel,individual_ap,generalized_ap,delta\n");
        for d in &self.delta {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                d.class_id, d.name, d.novel, d.individual_ap, d.generalized_ap, d.delta
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Bbox {
        Bbox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(image_id: u64, bbox: Bbox, class_id: usize, confidence: f64) -> Detection {
        Detection {
            image_id,
            bbox,
            class_id,
            confidence,
        }
    }

    fn gt(image_id: u64, bbox: Bbox, class_id: usize) -> GroundTruth {
        GroundTruth {
            image_id,
            bbox,
            class_id,
        }
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        assert!((iou(&a, &b(1.0, 0.0, 3.0, 2.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let bad = Bbox {
            x1: 1.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        };
        assert!(matches!(iou(&a, &bad), Err(Error::InvalidBox(..))));
    }

    #[test]
    fn ap_examples() {
        let g = [gt(0, b(0.0, 0.0, 2.0, 2.0), 0)];
        assert_eq!(
            average_precision(&[det(0, b(0.0, 0.0, 2.0, 2.0), 0, 0.9)], &g, 0.5),
            1.0
        );
        // IoU 1/3 < 0.5
        assert_eq!(
            average_precision(&[det(0, b(1.0, 0.0, 3.0, 2.0), 0, 0.9)], &g, 0.5),
            0.0
        );
        assert_eq!(average_precision(&[], &[], 0.5), 0.0);
        // other image never matches
        assert_eq!(
            average_precision(&[det(1, b(0.0, 0.0, 2.0, 2.0), 0, 0.9)], &g, 0.5),
            0.0
        );
    }

    #[test]
    fn ap_of_interleaved_ranking() {
        let boxes: Vec<Bbox> = (0..3)
            .map(|i| b(10.0 * i as f64, 0.0, 10.0 * i as f64 + 5.0, 5.0))
            .collect();
        let g: Vec<GroundTruth> = boxes.iter().map(|&bb| gt(0, bb, 0)).collect();
        // ranks: TP, FP, TP, (GT 3 missed)
        let d = [
            det(0, boxes[0], 0, 0.9),
            det(0, b(50.0, 50.0, 60.0, 60.0), 0, 0.8),
            det(0, boxes[1], 0, 0.7),
        ];
        let ap = average_precision(&d, &g, 0.5);
        assert!((ap - (1.0 / 3.0 + (2.0 / 3.0) * (1.0 / 3.0))).abs() < 1e-15);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let bx = b(0.0, 0.0, 4.0, 4.0);
        let d = [det(0, bx, 0, 0.9), det(0, bx, 0, 0.8)];
        let ap = average_precision(&d, &[gt(0, bx, 0)], 0.5);
        assert_eq!(ap, 1.0);
        let ap_low_first = average_precision(
            &[det(0, b(9.0, 9.0, 10.0, 10.0), 0, 0.95), d[0]],
            &[gt(0, bx, 0)],
            0.5,
        );
        assert_eq!(ap_low_first, 0.5);
    }

    fn classes() -> Vec<ClassInfo> {
        vec![
            ClassInfo {
                id: 0,
                name: "k00".into(),
                tokens: vec![2],
                novel: false,
            },
            ClassInfo {
                id: 1,
                name: "n00".into(),
                tokens: vec![3],
                novel: true,
            },
            ClassInfo {
                id: 2,
                name: "k01".into(),
                tokens: vec![4],
                novel: false,
            },
        ]
    }

    #[test]
    fn perfect_and_empty_reports() {
        let g = vec![
            gt(0, b(0.0, 0.0, 5.0, 5.0), 0),
            gt(0, b(10.0, 10.0, 20.0, 20.0), 1),
        ];
        let perfect: Vec<Detection> = g
            .iter()
            .map(|x| det(x.image_id, x.bbox, x.class_id, 0.9))
            .collect();
        let runs: Vec<SetupDetections> = Setup::ALL
            .iter()
            .map(|&s| SetupDetections {
                setup: s,
                class_set: s.class_set(),
                detections: perfect
                    .iter()
                    .filter(|d| members(s.class_set(), &classes()[d.class_id]))
                    .cloned()
                    .collect(),
            })
            .collect();
        let r = evaluate(&runs, &g, &classes()).unwrap();
        for s in Setup::ALL {
            let sm = r.setup_summary(s).unwrap();
            assert_eq!((sm.ap, sm.ap50, sm.ap75), (1.0, 1.0, 1.0));
        }
        // class 2 has no ground truth and is excluded from the known mean
        assert_eq!(r.known.as_ref().unwrap().summary.classes_evaluated, 1);
        assert!(r
            .delta
            .iter()
            .all(|d| d.delta == d.generalized_ap - d.individual_ap));

        let empty: Vec<SetupDetections> = Setup::ALL
            .iter()
            .map(|&s| SetupDetections {
                setup: s,
                class_set: s.class_set(),
                detections: vec![],
            })
            .collect();
        let r = evaluate(&empty, &g, &classes()).unwrap();
        for s in Setup::ALL {
            assert_eq!(r.setup_summary(s).unwrap().ap, 0.0);
        }
    }

    #[test]
    fn setup_mismatch_is_rejected() {
        let run = SetupDetections {
            setup: Setup::Novel,
            class_set: ClassSet::All,
            detections: vec![],
        };
        assert!(matches!(
            evaluate(&[run], &[], &classes()),
            Err(Error::SetupMismatch(_))
        ));
        let run = SetupDetections {
            setup: Setup::Novel,
            class_set: ClassSet::Novel,
            detections: vec![det(0, b(0.0, 0.0, 1.0, 1.0), 0, 0.5)],
        };
        assert!(matches!(
            evaluate(&[run], &[], &classes()),
            Err(Error::SetupMismatch(_))
        ));
    }

    #[test]
    fn aggregate_is_mean_of_thresholds() {
        let g = vec![gt(0, b(0.0, 0.0, 10.0, 10.0), 0)];
        let d = vec![det(0, b(0.0, 0.0, 10.0, 8.0), 0, 0.7)];
        let run = SetupDetections {
            setup: Setup::Known,
            class_set: ClassSet::Known,
            detections: d,
        };
        let r = evaluate(&[run], &g, &classes()).unwrap();
        let s = &r.known.unwrap().summary;
        assert_eq!(s.ap, s.per_threshold.iter().sum::<f64>() / 10.0);
        assert_eq!(s.ap50, 1.0);
        assert_eq!(s.per_threshold[6], 1.0);
        assert_eq!(s.per_threshold[7], 0.0);
    }
}
