//! Background-aware classification over class embeddings, the stage-two
//! training loop with partial freezing, and inference.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax, Tape, Tensor, Var};
use crate::embeddings::{class_averaging_matrix, class_embeddings_var, EMBEDDING_TABLE};
use crate::error::{Error, Result};
use crate::lsm::validate_schedule;
use crate::model::{encode_var, Model};
use crate::optim::{LrSchedule, Sgd};
use crate::params::{Bound, ParamGroup};
use crate::regions::{Bbox, BoxRegion, RegionKind};
use crate::synthworld::{ClassInfo, GroundTruthObject, SyntheticImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSet {
    Known,
    Novel,
    All,
}

/// Known and novel classes with their embeddings. Rows of `embeddings`
/// follow `classes`; the background is implicit (all-zeros vector, logit 0).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCatalog {
    classes: Vec<ClassInfo>,
    embeddings: Tensor,
}

impl ClassCatalog {
    pub fn new(classes: Vec<ClassInfo>, embeddings: Tensor) -> Result<Self> {
        if classes.len() != embeddings.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} classes but {} embedding rows",
                classes.len(),
                embeddings.rows()
            )));
        }
        if classes.iter().enumerate().any(|(i, c)| c.id != i) {
            return Err(Error::Dataset("class ids must be dense and ordered".into()));
        }
        Ok(Self {
            classes,
            embeddings,
        })
    }

    pub fn from_model(model: &Model, classes: &[ClassInfo]) -> Result<Self> {
        let tokens: Vec<Vec<usize>> = classes.iter().map(|c| c.tokens.clone()).collect();
        Self::new(classes.to_vec(), model.class_embeddings(&tokens)?)
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn ids(&self, set: ClassSet) -> Vec<usize> {
        self.classes
            .iter()
            .filter(|c| match set {
                ClassSet::Known => !c.novel,
                ClassSet::Novel => c.novel,
                ClassSet::All => true,
            })
            .map(|c| c.id)
            .collect()
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        self.embeddings.row(id)
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn is_novel(&self, id: usize) -> bool {
        self.classes.get(id).is_some_and(|c| c.novel)
    }
}

/// Distribution over one class set plus the background.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities {
    pub class_ids: Vec<usize>,
    pub probs: Vec<f64>,
    pub background: f64,
}

impl ClassProbabilities {
    /// Best non-background class, or `None` if the background wins (ties go
    /// to the background).
    pub fn argmax(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (&id, &p) in self.class_ids.iter().zip(&self.probs) {
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((id, p));
            }
        }
        best.filter(|&(_, p)| p > self.background)
    }
}

fn set_logits(r: &[f64], catalog: &ClassCatalog, ids: &[usize]) -> Vec<f64> {
    std::iter::once(0.0)
        .chain(
            ids.iter()
                .map(|&k| crate::diffcore::dot(r, catalog.embedding(k))),
        )
        .collect()
}

/// `exp(r·c_k) / (1 + Σ exp(r·c_k'))` for every class of `set`, and the
/// background `1 / (1 + Σ exp(r·c_k'))`.
pub fn classify_region(
    r: &[f64],
    catalog: &ClassCatalog,
    set: ClassSet,
) -> Result<ClassProbabilities> {
    if r.len() != catalog.dim() {
        return Err(Error::ShapeMismatch(format!(
            "region vector has dimension {}, class embeddings {}",
            r.len(),
            catalog.dim()
        )));
    }
    let ids = catalog.ids(set);
    if ids.is_empty() {
        return Err(Error::EmptySide("class set is empty"));
    }
    let p = softmax(&set_logits(r, catalog, &ids))?;
    Ok(ClassProbabilities {
        class_ids: ids,
        background: p[0],
        probs: p[1..].to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub bbox: Bbox,
    pub class_id: usize,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::invalid_config(
                "detect.score_threshold",
                "must lie in [0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::invalid_config(
                "detect.nms_iou",
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

fn box_iou(a: &Bbox, b: &Bbox) -> f64 {
    let inter = a.intersection(b);
    inter / (a.area() + b.area() - inter)
}

/// Greedy per-class suppression: a detection is dropped when its IoU with a
/// kept, higher-ranked detection of the same class exceeds `iou`. Output is
/// sorted by confidence, ties by input order.
pub fn nms(dets: &[Detection], iou: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || box_iou(&k.bbox, &d.bbox) <= iou)
        {
            kept.push(d);
        }
    }
    kept
}

/// Detections for one image from its box regions and their projected
/// features (`n×D`, rows aligned with `boxes`).
pub fn detect(
    image_id: u64,
    boxes: &[BoxRegion],
    projected: Option<&Tensor>,
    catalog: &ClassCatalog,
    set: ClassSet,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let Some(projected) = projected else {
        return Ok(Vec::new());
    };
    if projected.rows() != boxes.len() {
        return Err(Error::ShapeMismatch(
            "one projected row per box region".into(),
        ));
    }
    let mut raw = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let probs = classify_region(projected.row(i), catalog, set)?;
        if let Some((class_id, confidence)) = probs.argmax() {
            if confidence >= cfg.score_threshold {
                raw.push(Detection {
                    image_id,
                    bbox: b.bbox,
                    class_id,
                    confidence,
                });
            }
        }
    }
    Ok(nms(&raw, cfg.nms_iou))
}

/// Box regions of `img` and their projected features under `model`.
pub fn project_image(
    model: &Model,
    img: &SyntheticImage,
    threshold: f64,
    cap: usize,
) -> Result<(Vec<BoxRegion>, Option<Tensor>)> {
    let regions = img.regions(threshold, cap);
    let projected = match regions.features(RegionKind::Box) {
        Some(raw) => Some(model.encode_regions(&raw)?),
        None => None,
    };
    Ok((regions.boxes, projected))
}

/// Parameter groups held fixed during stage two.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FreezePolicy {
    pub frozen: BTreeSet<ParamGroup>,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            frozen: BTreeSet::from([
                ParamGroup::EncoderStage1,
                ParamGroup::EncoderStage2,
                ParamGroup::Projection,
                ParamGroup::Embedding,
            ]),
        }
    }
}

impl FreezePolicy {
    pub fn everything() -> Self {
        Self {
            frozen: ParamGroup::ALL.into_iter().collect(),
        }
    }

    pub fn trainable(&self) -> BTreeSet<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| !self.frozen.contains(g))
            .collect()
    }
}

/// Box regions of one annotated image with their labels (`None` is the
/// background).
#[derive(Clone, Debug, PartialEq)]
pub struct SttExample {
    pub image_id: u64,
    pub features: Tensor,
    pub labels: Vec<Option<usize>>,
}

/// Class of the best-overlapping object at IoU ≥ `match_iou`, else
/// background.
pub fn label_regions(
    boxes: &[BoxRegion],
    objects: &[GroundTruthObject],
    match_iou: f64,
) -> Vec<Option<usize>> {
    boxes
        .iter()
        .map(|b| {
            objects
                .iter()
                .map(|o| (box_iou(&b.bbox, &o.bbox), o.class_id))
                .filter(|&(v, _)| v >= match_iou)
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, k)| k)
        })
        .collect()
}

impl SttExample {
    /// `None` for caption-only images and images without box regions.
    pub fn from_image(
        img: &SyntheticImage,
        threshold: f64,
        cap: usize,
        match_iou: f64,
    ) -> Option<Self> {
        if img.caption_only || img.objects.is_empty() {
            return None;
        }
        let regions = img.regions(threshold, cap);
        let features = regions.features(RegionKind::Box)?;
        Some(Self {
            image_id: img.image_id,
            labels: label_regions(&regions.boxes, &img.objects, match_iou),
            features,
        })
    }
}

/// Known-class classifier: class ids in column order and the averaging
/// matrix that builds their embeddings from the table.
#[derive(Clone, Debug, PartialEq)]
pub struct KnownHead {
    pub class_ids: Vec<usize>,
    pub averaging: Tensor,
}

impl KnownHead {
    pub fn new(classes: &[ClassInfo], vocab: usize) -> Result<Self> {
        let known: Vec<&ClassInfo> = classes.iter().filter(|c| !c.novel).collect();
        if known.is_empty() {
            return Err(Error::EmptySide("no known classes"));
        }
        let tokens: Vec<Vec<usize>> = known.iter().map(|c| c.tokens.clone()).collect();
        Ok(Self {
            class_ids: known.iter().map(|c| c.id).collect(),
            averaging: class_averaging_matrix(&tokens, vocab)?,
        })
    }

    fn column(&self, label: Option<usize>) -> Result<usize> {
        match label {
            None => Ok(0),
            Some(id) => self
                .class_ids
                .iter()
                .position(|&k| k == id)
                .map(|p| p + 1)
                .ok_or(Error::NovelLabelInStt(id)),
        }
    }
}

/// Mean cross-entropy of the background-aware distribution over every
/// region of the batch.
pub fn stt_loss_var(
    tape: &mut Tape,
    bound: &Bound,
    batch: &[&SttExample],
    head: &KnownHead,
) -> Result<Var> {
    let mut targets = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.labels.len() != ex.features.rows() {
            return Err(Error::ShapeMismatch("one label per region".into()));
        }
        targets.push(
            ex.labels
                .iter()
                .map(|&l| head.column(l))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    if batch.is_empty() {
        return Err(Error::EmptySide("empty batch"));
    }
    let c = class_embeddings_var(tape, bound.var(EMBEDDING_TABLE), &head.averaging);
    let mut picked = Vec::with_capacity(batch.len());
    for (ex, cols) in batch.iter().zip(&targets) {
        let x = tape.constant(ex.features.clone());
        let r = encode_var(tape, bound, x);
        let logits = tape.matmul_nt(r, c);
        let bg = tape.constant(Tensor::zeros(ex.features.rows(), 1));
        let full = tape.concat_cols(&[bg, logits]);
        let logp = tape.log_softmax_rows(full);
        let idx: Vec<(usize, usize)> = cols.iter().enumerate().map(|(i, &k)| (i, k)).collect();
        picked.push(tape.take(logp, &idx));
    }
    let all = if picked.len() == 1 {
        picked[0]
    } else {
        tape.concat_cols(&picked)
    };
    let m = tape.mean(all);
    Ok(tape.scale(m, -1.0))
}

pub fn stt_loss(model: &Model, batch: &[&SttExample], head: &KnownHead) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &BTreeSet::new());
    let l = stt_loss_var(&mut tape, &bound, batch, head)?;
    Ok(tape.scalar(l))
}

/// One optimizer step; frozen groups receive no update.
pub fn stt_train_step(
    model: &mut Model,
    sgd: &mut Sgd,
    batch: &[&SttExample],
    head: &KnownHead,
    policy: &FreezePolicy,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &policy.trainable());
    let l = stt_loss_var(&mut tape, &bound, batch, head)?;
    let loss = tape.scalar(l);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("stage-two loss {loss}")));
    }
    let mut g = tape.backward(l)?;
    let grads = bound.gradients(&mut g);
    sgd.step(&mut model.params, &grads, lr);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SttConfig {
    pub steps: usize,
    /// Images per batch.
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub freeze: FreezePolicy,
    /// IoU at which a region takes a known object's label.
    pub match_iou: f64,
    /// Validate every this many steps (0 disables early stopping).
    pub eval_every: usize,
    pub patience: usize,
}

impl Default for SttConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 16,
            schedule: LrSchedule {
                base: 0.005,
                decay_steps: vec![300],
                decay_factor: 10.0,
            },
            momentum: 0.9,
            clip_norm: Some(5.0),
            freeze: FreezePolicy::default(),
            match_iou: 0.5,
            eval_every: 50,
            patience: 3,
        }
    }
}

impl SttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid_config(
                "stt.batch_size",
                "must be at least 1",
            ));
        }
        validate_schedule("stt.schedule", &self.schedule)?;
        if !(0.0..=1.0).contains(&self.match_iou) {
            return Err(Error::invalid_config("stt.match_iou", "must lie in [0, 1]"));
        }
        if self.eval_every > 0 && self.patience == 0 {
            return Err(Error::invalid_config("stt.patience", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SttStepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Validation score when evaluated at this step.
    pub val_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SttOutcome {
    pub log: Vec<SttStepRecord>,
    /// Step whose parameters were kept (`None` when never validated).
    pub best_step: Option<usize>,
    pub best_score: Option<f64>,
    pub stopped_early: bool,
}

/// Trains on `examples`, validating with `validate` every
/// `cfg.eval_every` steps. Stops after `cfg.patience` validations without
/// improvement and restores the best parameters seen.
pub fn train_stt(
    model: &mut Model,
    sgd: &mut Sgd,
    examples: &[SttExample],
    head: &KnownHead,
    cfg: &SttConfig,
    seed: u64,
    mut validate: impl FnMut(&Model) -> Result<f64>,
) -> Result<SttOutcome> {
    cfg.validate()?;
    if examples.is_empty() && cfg.steps > 0 {
        return Err(Error::Dataset("no annotated training images".into()));
    }
    for ex in examples {
        for &l in &ex.labels {
            head.column(l)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let b = cfg.batch_size.min(examples.len().max(1));
    let mut log = Vec::with_capacity(cfg.steps);
    let mut best: Option<(usize, f64, crate::params::ParamStore)> = None;
    let mut stale = 0usize;
    let mut stopped_early = false;
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(b);
        while idx.len() < b {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            if !idx.contains(&i) {
                idx.push(i);
            }
        }
        let batch: Vec<&SttExample> = idx.iter().map(|&i| &examples[i]).collect();
        let lr = cfg.schedule.rate(step);
        let loss = stt_train_step(model, sgd, &batch, head, &cfg.freeze, lr)?;
        let mut record = SttStepRecord {
            step,
            lr,
            loss,
            val_score: None,
        };
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let score = validate(model)?;
            record.val_score = Some(score);
            if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
                best = Some((step, score, model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log.push(record);
        if stale >= cfg.patience && cfg.eval_every > 0 {
            stopped_early = true;
            break;
        }
    }
    let (best_step, best_score) = match best {
        Some((step, score, params)) => {
            model.params = params;
            (Some(step), Some(score))
        }
        None => (None, None),
    };
    Ok(SttOutcome {
        log,
        best_step,
        best_score,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{compare_gradients, finite_difference_gradient, FD_STEP};
    use crate::regions::Bbox;
    use crate::testutil::{random_matrix, tiny_model};

    fn catalog(embeddings: Vec<Vec<f64>>, novel_from: usize) -> ClassCatalog {
        let classes = (0..embeddings.len())
            .map(|i| ClassInfo {
                id: i,
                name: format!("c{i}"),
                tokens: vec![i + 2],
                novel: i >= novel_from,
            })
            .collect();
        ClassCatalog::new(classes, Tensor::from_rows(&embeddings).unwrap()).unwrap()
    }

    fn region(x: f64) -> BoxRegion {
        BoxRegion {
            bbox: Bbox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            objectness: 0.9,
            feature: vec![],
            source: 0,
        }
    }

    #[test]
    fn orthogonal_region_is_uniform() {
        let k = 48;
        let embeddings: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let mut v = vec![0.0; k + 1];
                v[i] = 1.0;
                v
            })
            .collect();
        let cat = catalog(embeddings, k);
        let mut r = vec![0.0; k + 1];
        r[k] = 3.0;
        let p = classify_region(&r, &cat, ClassSet::All).unwrap();
        for &q in p.probs.iter().chain([&p.background]) {
            assert!((q - 1.0 / 49.0).abs() < 1e-12);
        }
        assert!(classify_region(&[1.0], &cat, ClassSet::All).is_err());
        assert!(classify_region(&r, &cat, ClassSet::Novel).is_err());
    }

    #[test]
    fn saturation_and_formula() {
        let cat = catalog(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]], 3);
        let p = classify_region(&[100.0, 0.0], &cat, ClassSet::All).unwrap();
        assert!(p.probs[0] > 0.99);
        let r = [0.3, -0.7];
        let p = classify_region(&r, &cat, ClassSet::Known).unwrap();
        let e: Vec<f64> = [0.3f64, -0.7, -0.3].iter().map(|v| v.exp()).collect();
        let z = 1.0 + e.iter().sum::<f64>();
        for (k, &ek) in e.iter().enumerate() {
            assert!((p.probs[k] - ek / z).abs() < 1e-15);
        }
        assert!((p.background - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn detect_examples() {
        let cat = catalog(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        let cfg = DetectConfig {
            score_threshold: 0.5,
            nms_iou: 0.5,
        };
        // strongly negative dots: background wins everywhere
        let neg = Tensor::from_rows(&[vec![-5.0, -5.0]]).unwrap();
        assert!(
            detect(0, &[region(0.0)], Some(&neg), &cat, ClassSet::All, &cfg)
                .unwrap()
                .is_empty()
        );
        // class 0 with probability 0.9: logit l with e^l / (1 + e^l + 1) = 0.9
        let l = (0.9f64 * 2.0 / 0.1).ln();
        let one = Tensor::from_rows(&[vec![l, 0.0]]).unwrap();
        let d = detect(3, &[region(0.0)], Some(&one), &cat, ClassSet::All, &cfg).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d[0].confidence - 0.9).abs() < 1e-12);
        assert_eq!((d[0].image_id, d[0].class_id), (3, 0));
    }

    #[test]
    fn nms_keeps_higher_of_overlapping_pair() {
        let a = Bbox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = Bbox::new(0.0, 0.0, 10.0, 8.0).unwrap(); // IoU 0.8
        let c = Bbox::new(50.0, 50.0, 60.0, 60.0).unwrap();
        let det = |bbox, class_id, confidence| Detection {
            image_id: 0,
            bbox,
            class_id,
            confidence,
        };
        let kept = nms(
            &[
                det(b, 0, 0.6),
                det(a, 0, 0.7),
                det(c, 0, 0.2),
                det(b, 1, 0.5),
            ],
            0.5,
        );
        assert_eq!(kept, vec![det(a, 0, 0.7), det(b, 1, 0.5), det(c, 0, 0.2)]);
    }

    #[test]
    fn novel_label_is_rejected() {
        let model = tiny_model(1);
        let classes: Vec<ClassInfo> = (0..3)
            .map(|i| ClassInfo {
                id: i,
                name: format!("c{i}"),
                tokens: vec![i + 2],
                novel: i == 2,
            })
            .collect();
        let head = KnownHead::new(&classes, model.dims.vocab_size).unwrap();
        let ex = SttExample {
            image_id: 0,
            features: Tensor::zeros(2, 5),
            labels: vec![None, Some(2)],
        };
        assert!(matches!(
            stt_loss(&model, &[&ex], &head),
            Err(Error::NovelLabelInStt(2))
        ));
    }

    #[test]
    fn background_batch_with_zero_trainables_gives_log_k_plus_one() {
        let mut model = tiny_model(2);
        // zero projection: every region vector is zero
        for name in [
            crate::embeddings::PROJECTION_WEIGHT,
            crate::embeddings::PROJECTION_BIAS,
        ] {
            model.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let classes: Vec<ClassInfo> = (0..4)
            .map(|i| ClassInfo {
                id: i,
                name: format!("c{i}"),
                tokens: vec![i + 2],
                novel: false,
            })
            .collect();
        let head = KnownHead::new(&classes, model.dims.vocab_size).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = SttExample {
            image_id: 0,
            features: random_matrix(3, 5, 1.0, &mut rng),
            labels: vec![None; 3],
        };
        assert!((stt_loss(&model, &[&ex], &head).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stt_gradient_matches_finite_differences() {
        let model = tiny_model(4);
        let classes: Vec<ClassInfo> = (0..4)
            .map(|i| ClassInfo {
                id: i,
                name: format!("c{i}"),
                tokens: vec![i + 2],
                novel: i == 3,
            })
            .collect();
        let head = KnownHead::new(&classes, model.dims.vocab_size).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex = SttExample {
            image_id: 0,
            features: random_matrix(3, 5, 1.0, &mut rng),
            labels: vec![Some(0), None, Some(2)],
        };
        let name = crate::model::encoder_weight(3);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &BTreeSet::from([ParamGroup::EncoderStage3]));
        let l = stt_loss_var(&mut tape, &bound, &[&ex], &head).unwrap();
        let mut g = tape.backward(l).unwrap();
        let analytic = bound.gradients(&mut g).swap_remove(&name).unwrap();
        let numeric = finite_difference_gradient(
            |w| {
                let mut m = model.clone();
                *m.params.get_mut(&name).unwrap() = w.clone();
                stt_loss(&m, &[&ex], &head)
            },
            model.params.get(&name).unwrap(),
            FD_STEP,
        )
        .unwrap();
        assert!(compare_gradients(analytic.data(), numeric.data()).passes());
    }
}
