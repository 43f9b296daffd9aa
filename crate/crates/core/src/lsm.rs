//! Stage one: region-word grounding plus the fusion objectives, summed
//! without weights, trained with momentum SGD.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::embeddings::{embed_caption_var, EMBEDDING_TABLE};
use crate::error::{Error, Result};
use crate::fusion::{consistency_loss_var, icm_loss_var, Fusion, MaskedBatch, MASK_RATE};
use crate::matching::{batch_similarity_var, symmetric_grounding_var};
use crate::model::{encode_var, Model};
use crate::optim::{LrSchedule, Sgd};
use crate::params::ParamGroup;
use crate::regions::RegionKind;
use crate::synthworld::SyntheticImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    Box,
    Grid,
    Both,
}

impl RegionMode {
    pub fn kinds(self) -> &'static [RegionKind] {
        match self {
            RegionMode::Box => &[RegionKind::Box],
            RegionMode::Grid => &[RegionKind::Grid],
            RegionMode::Both => &[RegionKind::Box, RegionKind::Grid],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionMode::Box => "box",
            RegionMode::Grid => "grid",
            RegionMode::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub grounding: bool,
    pub icm: bool,
    pub mlm: bool,
    pub consistency: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            grounding: true,
            icm: true,
            mlm: true,
            consistency: true,
        }
    }
}

impl LossToggles {
    fn needs_fusion(&self) -> bool {
        self.icm || self.mlm || self.consistency
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub losses: LossToggles,
    /// Let the consistency loss also move the pre-fusion side.
    pub bidirectional_consistency: bool,
    pub train_embedding: bool,
    pub mask_rate: f64,
    /// Write an intermediate checkpoint every this many steps (0: never).
    pub checkpoint_every: usize,
}

impl Default for LsmConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            schedule: LrSchedule {
                base: 0.01,
                decay_steps: vec![400],
                decay_factor: 10.0,
            },
            momentum: 0.9,
            clip_norm: Some(5.0),
            losses: LossToggles::default(),
            bidirectional_consistency: false,
            train_embedding: false,
            mask_rate: MASK_RATE,
            checkpoint_every: 0,
        }
    }
}

impl LsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid_config(
                "lsm.batch_size",
                "must be at least 1",
            ));
        }
        validate_schedule("lsm.schedule", &self.schedule)?;
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::invalid_config("lsm.mask_rate", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn trainable_groups(&self) -> BTreeSet<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| *g != ParamGroup::Embedding || self.train_embedding)
            .collect()
    }
}

pub(crate) fn validate_schedule(field: &str, s: &LrSchedule) -> Result<()> {
    if !(s.base > 0.0 && s.base.is_finite()) {
        return Err(Error::invalid_config(
            format!("{field}.base"),
            "must be positive",
        ));
    }
    if !(s.decay_factor > 0.0 && s.decay_factor.is_finite()) {
        return Err(Error::invalid_config(
            format!("{field}.decay_factor"),
            "must be positive",
        ));
    }
    if !s.is_strictly_increasing() {
        return Err(Error::invalid_config(
            format!("{field}.decay_steps"),
            "must be strictly increasing",
        ));
    }
    Ok(())
}

/// Raw inputs of one image-caption pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LsmExample {
    /// Selected box-region features (`n×F`); `None` when no proposal passes.
    pub boxes: Option<Tensor>,
    /// `G²×F` grid-region features.
    pub grid: Tensor,
    pub caption: Vec<usize>,
}

impl LsmExample {
    pub fn from_image(img: &SyntheticImage, threshold: f64, cap: usize) -> Self {
        let regions = img.regions(threshold, cap);
        Self {
            boxes: regions.features(RegionKind::Box),
            grid: regions
                .features(RegionKind::Grid)
                .expect("grid has G² ≥ 1 cells"),
            caption: img.caption.clone(),
        }
    }

    fn features(&self, kind: RegionKind) -> Result<&Tensor> {
        match kind {
            RegionKind::Box => self.boxes.as_ref().ok_or(Error::EmptySide(
                "image has no box regions above the objectness threshold",
            )),
            RegionKind::Grid => Ok(&self.grid),
        }
    }
}

/// One forward pass worth of loss nodes. Disabled components are `None`.
pub struct LsmGraph {
    pub total: Var,
    pub grounding: Option<Var>,
    pub icm: Option<Var>,
    pub mlm: Option<Var>,
    pub consistency: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsmLosses {
    pub grounding: f64,
    pub icm: f64,
    pub mlm: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LsmGraph {
    pub fn values(&self, tape: &Tape) -> LsmLosses {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.scalar(x));
        LsmLosses {
            grounding: v(self.grounding),
            icm: v(self.icm),
            mlm: v(self.mlm),
            consistency: v(self.consistency),
            total: tape.scalar(self.total),
        }
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Option<Var> {
    let (&first, rest) = vars.split_first()?;
    Some(rest.iter().fold(first, |acc, &v| tape.add(acc, v)))
}

/// Builds the stage-one objective for a batch on `tape`. `masks` holds one
/// masked copy per caption (required when the MLM term is on).
#[allow(clippy::too_many_arguments)]
pub fn lsm_graph(
    tape: &mut Tape,
    model: &Model,
    bound: &crate::params::Bound,
    batch: &[&LsmExample],
    masks: &[MaskedBatch],
    mode: RegionMode,
    toggles: LossToggles,
    bidirectional: bool,
) -> Result<LsmGraph> {
    let table = bound.var(EMBEDDING_TABLE);
    let vocab = model.dims.vocab_size;
    let mut words = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.caption.is_empty() {
            return Err(Error::EmptySide("caption has no tokens"));
        }
        if let Some(&id) = ex.caption.iter().find(|&&t| t >= vocab) {
            return Err(Error::UnknownToken { id, vocab });
        }
        words.push(embed_caption_var(tape, table, &ex.caption));
    }

    let fusion = Fusion::new(&model.dims, bound);
    let prefixes: Vec<Var> = if toggles.icm || toggles.consistency {
        words
            .iter()
            .map(|&w| fusion.caption_prefix(tape, w))
            .collect()
    } else {
        Vec::new()
    };

    let mut grounding_terms = Vec::new();
    let mut icm_terms = Vec::new();
    let mut mlm_terms = Vec::new();
    let (mut pre, mut post) = ([None, None], [None, None]);
    for &kind in mode.kinds() {
        let slot = kind as usize;
        let mut regions = Vec::with_capacity(batch.len());
        for ex in batch {
            let raw = ex.features(kind)?;
            model.check_features(raw)?;
            let x = tape.constant(raw.clone());
            regions.push(encode_var(tape, bound, x));
        }
        if toggles.grounding || toggles.consistency {
            let sim = batch_similarity_var(tape, &regions, &words);
            if toggles.grounding {
                grounding_terms.push(symmetric_grounding_var(tape, sim));
            }
            pre[slot] = Some(sim);
        }
        if toggles.needs_fusion() {
            let memories: Vec<_> = regions
                .iter()
                .map(|&r| fusion.region_memory(tape, r))
                .collect();
            if toggles.icm || toggles.consistency {
                let fused = fusion.batch_scores(tape, &memories, &prefixes);
                if toggles.icm {
                    icm_terms.push(icm_loss_var(tape, fused));
                }
                post[slot] = Some(fused);
            }
            if toggles.mlm {
                if masks.len() != batch.len() {
                    return Err(Error::EmptyMask);
                }
                let per_caption: Vec<Var> = masks
                    .iter()
                    .zip(&memories)
                    .map(|(m, mem)| {
                        let w = embed_caption_var(tape, table, &m.tokens);
                        fusion.mlm_loss_var(tape, w, mem, m)
                    })
                    .collect();
                let s = sum_vars(tape, &per_caption).expect("non-empty batch");
                mlm_terms.push(tape.scale(s, 1.0 / per_caption.len() as f64));
            }
        }
    }

    let grounding = sum_vars(tape, &grounding_terms);
    let icm = sum_vars(tape, &icm_terms);
    let mlm = sum_vars(tape, &mlm_terms).map(|s| tape.scale(s, 1.0 / mlm_terms.len() as f64));
    let consistency = if toggles.consistency {
        consistency_loss_var(tape, pre[0], pre[1], post[0], post[1], bidirectional)
    } else {
        None
    };
    let parts: Vec<Var> = [grounding, icm, mlm, consistency]
        .into_iter()
        .flatten()
        .collect();
    let total = match sum_vars(tape, &parts) {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(LsmGraph {
        total,
        grounding,
        icm,
        mlm,
        consistency,
    })
}

/// One logged training step. The key set is fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsmStepRecord {
    pub step: usize,
    pub lr: f64,
    pub grounding: f64,
    pub icm: f64,
    pub mlm: f64,
    pub consistency: f64,
    pub total: f64,
}

/// Runs `cfg.steps` steps starting at `start_step`. Batches are drawn by
/// reshuffling `examples` each epoch from `seed`.
pub fn train_lsm(
    model: &mut Model,
    sgd: &mut Sgd,
    examples: &[LsmExample],
    cfg: &LsmConfig,
    mode: RegionMode,
    seed: u64,
    mut on_step: impl FnMut(&LsmStepRecord, &Model, &Sgd) -> Result<()>,
) -> Result<Vec<LsmStepRecord>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Dataset("no training pairs".into()));
    }
    let trainable = cfg.trainable_groups();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let b = cfg.batch_size.min(examples.len());
    let mut log = Vec::with_capacity(cfg.steps);
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
        let batch: Vec<&LsmExample> = idx.iter().map(|&i| &examples[i]).collect();
        let masks = if cfg.losses.mlm {
            batch
                .iter()
                .map(|ex| MaskedBatch::random(&ex.caption, cfg.mask_rate, &mut rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &trainable);
        let graph = lsm_graph(
            &mut tape,
            model,
            &bound,
            &batch,
            &masks,
            mode,
            cfg.losses,
            cfg.bidirectional_consistency,
        )?;
        let losses = graph.values(&tape);
        if !losses.total.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "stage-one loss at step {step}: {losses:?}"
            )));
        }
        let mut grads = tape.backward(graph.total)?;
        let grads = bound.gradients(&mut grads);
        let lr = cfg.schedule.rate(step);
        sgd.step(&mut model.params, &grads, lr);
        let record = LsmStepRecord {
            step,
            lr,
            grounding: losses.grounding,
            icm: losses.icm,
            mlm: losses.mlm,
            consistency: losses.consistency,
            total: losses.total,
        };
        on_step(&record, model, sgd)?;
        log.push(record);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_matrix, tiny_model};

    fn examples(n: usize, seed: u64) -> Vec<LsmExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| LsmExample {
                boxes: Some(random_matrix(2 + i % 2, 5, 1.0, &mut rng)),
                grid: random_matrix(4, 5, 1.0, &mut rng),
                caption: vec![2 + i % 5, 7 + i % 4, 3],
            })
            .collect()
    }

    #[test]
    fn disabled_terms_log_zero() {
        let model = tiny_model(1);
        let ex = examples(3, 2);
        let batch: Vec<&LsmExample> = ex.iter().collect();
        let toggles = LossToggles {
            icm: false,
            mlm: false,
            ..LossToggles::default()
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &ParamGroup::ALL.into_iter().collect());
        let g = lsm_graph(
            &mut tape,
            &model,
            &bound,
            &batch,
            &[],
            RegionMode::Both,
            toggles,
            false,
        )
        .unwrap();
        let v = g.values(&tape);
        assert_eq!(v.icm, 0.0);
        assert_eq!(v.mlm, 0.0);
        assert!(v.grounding > 0.0 && v.consistency >= 0.0);
        assert!((v.total - v.grounding - v.consistency).abs() < 1e-12);
    }

    #[test]
    fn frozen_embedding_stays_bitwise_fixed() {
        let mut model = tiny_model(3);
        let before = model.embedding_table().clone();
        let proj_before = model
            .params
            .get(crate::embeddings::PROJECTION_WEIGHT)
            .unwrap()
            .clone();
        let cfg = LsmConfig {
            steps: 5,
            batch_size: 3,
            ..LsmConfig::default()
        };
        let mut sgd = Sgd::new(cfg.momentum, cfg.clip_norm);
        train_lsm(
            &mut model,
            &mut sgd,
            &examples(4, 4),
            &cfg,
            RegionMode::Both,
            0,
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert_eq!(model.embedding_table(), &before);
        assert_ne!(
            model
                .params
                .get(crate::embeddings::PROJECTION_WEIGHT)
                .unwrap(),
            &proj_before
        );
    }

    #[test]
    fn missing_box_regions_is_an_error_only_when_used() {
        let model = tiny_model(1);
        let mut ex = examples(2, 5);
        ex[0].boxes = None;
        let batch: Vec<&LsmExample> = ex.iter().collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &BTreeSet::new());
        let toggles = LossToggles {
            mlm: false,
            ..LossToggles::default()
        };
        assert!(lsm_graph(
            &mut tape,
            &model,
            &bound,
            &batch,
            &[],
            RegionMode::Both,
            toggles,
            false
        )
        .is_err());
        assert!(lsm_graph(
            &mut tape,
            &model,
            &bound,
            &batch,
            &[],
            RegionMode::Grid,
            toggles,
            false
        )
        .is_ok());
    }
}
