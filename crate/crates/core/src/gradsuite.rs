//! Randomized analytic-vs-numeric gradient checks for every training
//! objective.
//!
//! Each instance draws small dimensions and a fresh model, evaluates the
//! analytic gradient once, and compares it against central differences on a
//! random sample of parameter coordinates that receive gradient.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{stt_loss_var, KnownHead, SttExample};
use crate::diffcore::{compare_gradients, GradDiff, Tape, Var, FD_STEP};
use crate::error::Result;
use crate::fusion::MaskedBatch;
use crate::lsm::{lsm_graph, LossToggles, LsmExample, RegionMode};
use crate::model::{gaussian, InitConfig, Model, ModelDims};
use crate::params::{Bound, ParamGroup};
use crate::synthworld::ClassInfo;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTerm {
    Grounding,
    Icm,
    Mlm,
    Consistency,
    LsmTotal,
    SttCe,
}

impl GradTerm {
    pub const ALL: [GradTerm; 6] = [
        GradTerm::Grounding,
        GradTerm::Icm,
        GradTerm::Mlm,
        GradTerm::Consistency,
        GradTerm::LsmTotal,
        GradTerm::SttCe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTerm::Grounding => "grounding",
            GradTerm::Icm => "icm",
            GradTerm::Mlm => "mlm",
            GradTerm::Consistency => "consistency",
            GradTerm::LsmTotal => "lsm_total",
            GradTerm::SttCe => "stt_ce",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    fn toggles(self) -> LossToggles {
        let only = |g, i, m, c| LossToggles {
            grounding: g,
            icm: i,
            mlm: m,
            consistency: c,
        };
        match self {
            GradTerm::Grounding => only(true, false, false, false),
            GradTerm::Icm => only(false, true, false, false),
            GradTerm::Mlm => only(false, false, true, false),
            GradTerm::Consistency => only(false, false, false, true),
            GradTerm::LsmTotal | GradTerm::SttCe => LossToggles::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradSuiteConfig {
    pub instances: usize,
    /// Parameter coordinates probed per instance.
    pub coordinates: usize,
    pub seed: u64,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            coordinates: 24,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub term: GradTerm,
    pub instance: usize,
    pub embed_dim: usize,
    pub batch: usize,
    pub coordinates: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    pub passed: bool,
}

struct Instance {
    model: Model,
    lsm: Vec<LsmExample>,
    masks: Vec<MaskedBatch>,
    stt: Vec<SttExample>,
    head: KnownHead,
}

fn instance(seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = 2;
    let dims = ModelDims {
        feature_dim: rng.random_range(3..=5),
        embed_dim: heads * rng.random_range(2..=4),
        vocab_size: 10,
        fusion_layers: 2,
        heads,
        ffn_hidden: rng.random_range(3..=6),
        max_caption_len: 4,
    };
    let init = InitConfig {
        embedding_std: 0.5,
        encoder_gain: 0.8,
    };
    let mut model = Model::init(dims.clone(), &init, &mut rng)?;
    // Perturb the zero-initialized biases so every path carries signal.
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let t = model.params.get_mut(&name).expect("listed");
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }

    let b = rng.random_range(2..=4);
    let f = dims.feature_dim;
    let mut lsm = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b);
    for _ in 0..b {
        let len = rng.random_range(2..=4);
        let caption: Vec<usize> = (0..len)
            .map(|_| rng.random_range(2..dims.vocab_size))
            .collect();
        let pos = rng.random_range(0..len);
        masks.push(MaskedBatch::new(&caption, &[pos])?);
        lsm.push(LsmExample {
            boxes: Some(gaussian(rng.random_range(1..=3), f, 1.0, &mut rng)),
            grid: gaussian(4, f, 1.0, &mut rng),
            caption,
        });
    }

    let classes: Vec<ClassInfo> = (0..3)
        .map(|id| ClassInfo {
            id,
            name: format!("c{id}"),
            tokens: vec![2 + id],
            novel: id == 2,
        })
        .collect();
    let head = KnownHead::new(&classes, dims.vocab_size)?;
    let stt = (0..b)
        .map(|i| {
            let n = rng.random_range(2..=4);
            SttExample {
                image_id: i as u64,
                features: gaussian(n, f, 1.0, &mut rng),
                labels: (0..n)
                    .map(|_| *[None, Some(0), Some(1)].choose(&mut rng).unwrap())
                    .collect(),
            }
        })
        .collect();
    Ok(Instance {
        model,
        lsm,
        masks,
        stt,
        head,
    })
}

/// Builds the objective for `term`. Consistency is checked with gradients
/// flowing to both sides, which is the mathematical derivative of the loss.
fn build(
    term: GradTerm,
    inst: &Instance,
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
) -> Result<Var> {
    if term == GradTerm::SttCe {
        let batch: Vec<&SttExample> = inst.stt.iter().collect();
        return stt_loss_var(tape, bound, &batch, &inst.head);
    }
    let batch: Vec<&LsmExample> = inst.lsm.iter().collect();
    let g = lsm_graph(
        tape,
        model,
        bound,
        &batch,
        &inst.masks,
        RegionMode::Both,
        term.toggles(),
        true,
    )?;
    Ok(g.total)
}

fn scalar(term: GradTerm, inst: &Instance, model: &Model) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &BTreeSet::new());
    let l = build(term, inst, model, &mut tape, &bound)?;
    Ok(tape.scalar(l))
}

/// Checks one random instance. With `corrupt`, the analytic gradient is
/// scaled by 1.01 before comparison, which the check must reject.
pub fn check_instance(
    term: GradTerm,
    seed: u64,
    coordinates: usize,
    corrupt: bool,
) -> Result<GradCheckResult> {
    let inst = instance(seed)?;
    let mut model = inst.model.clone();
    let all: BTreeSet<ParamGroup> = ParamGroup::ALL.into_iter().collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &all);
    let l = build(term, &inst, &model, &mut tape, &bound)?;
    let mut g = tape.backward(l)?;
    let grads = bound.gradients(&mut g);

    let mut pool: Vec<(String, usize)> = Vec::new();
    for (name, t) in &grads {
        if t.data().iter().any(|v| *v != 0.0) {
            pool.extend((0..t.len()).map(|i| (name.clone(), i)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let picks: Vec<(String, usize)> = pool
        .choose_multiple(&mut rng, coordinates)
        .cloned()
        .collect();

    let scale = if corrupt { 1.01 } else { 1.0 };
    let mut analytic = Vec::with_capacity(picks.len());
    let mut numeric = Vec::with_capacity(picks.len());
    for (name, i) in &picks {
        analytic.push(grads[name].data()[*i] * scale);
        let orig = model.params.get(name).expect("bound").data()[*i];
        model.params.get_mut(name).expect("bound").data_mut()[*i] = orig + FD_STEP;
        let plus = scalar(term, &inst, &model)?;
        model.params.get_mut(name).expect("bound").data_mut()[*i] = orig - FD_STEP;
        let minus = scalar(term, &inst, &model)?;
        model.params.get_mut(name).expect("bound").data_mut()[*i] = orig;
        numeric.push((plus - minus) / (2.0 * FD_STEP));
    }
    let diff: GradDiff = compare_gradients(&analytic, &numeric);
    Ok(GradCheckResult {
        term,
        instance: 0,
        embed_dim: inst.model.dims.embed_dim,
        batch: inst.lsm.len(),
        coordinates: picks.len(),
        max_rel: diff.max_rel,
        max_abs: diff.max_abs,
        passed: diff.passes() && !picks.is_empty(),
    })
}

/// Runs `cfg.instances` instances of every term in `terms`.
pub fn run_suite(
    terms: &[GradTerm],
    cfg: &GradSuiteConfig,
    corrupt: Option<GradTerm>,
) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::with_capacity(terms.len() * cfg.instances);
    for &term in terms {
        for i in 0..cfg.instances {
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut r = check_instance(term, seed, cfg.coordinates, corrupt == Some(term))?;
            r.instance = i;
            out.push(r);
        }
    }
    Ok(out)
}
