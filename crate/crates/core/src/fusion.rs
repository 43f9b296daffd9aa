//! Cross-attention fusion over (regions, words) and the objectives built on
//! it: image-caption matching, masked language modeling and the
//! pre/post-fusion consistency regularizer.
//!
//! Layers are pre-norm: word self-attention, word-to-region cross-attention,
//! then a feed-forward block. Words carry learned positions; regions carry
//! none, so a fused score is invariant to region order.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{kl_divergence, softmax, Tape, Tensor, Var};
use crate::embeddings::{EMBEDDING_TABLE, MASK_ID};
use crate::error::{Error, Result};
use crate::matching::{grounding_loss, grounding_loss_var, Axis};
use crate::model::{gaussian, Model, ModelDims};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::regions::RegionKind;

pub const MASK_RATE: f64 = 0.15;

const POS: &str = "fusion.pos";
const REGION_LN_G: &str = "fusion.region_ln.g";
const REGION_LN_B: &str = "fusion.region_ln.b";
const FINAL_LN_G: &str = "fusion.final_ln.g";
const FINAL_LN_B: &str = "fusion.final_ln.b";
const SCORE_W: &str = "fusion.score.w";
const SCORE_B: &str = "fusion.score.b";
const MLM_W: &str = "fusion.mlm.w";
const MLM_B: &str = "fusion.mlm.b";
const MLM_OUT_B: &str = "fusion.mlm.out_b";

fn layer_param(layer: usize, name: &str) -> String {
    format!("fusion.layer{layer}.{name}")
}

pub(crate) fn init_params(store: &mut ParamStore, dims: &ModelDims, rng: &mut impl Rng) {
    let d = dims.embed_dim;
    let h = dims.ffn_hidden;
    let sd = 1.0 / (d as f64).sqrt();
    let g = ParamGroup::Fusion;
    store.insert(POS, g, gaussian(dims.max_caption_len, d, 0.02, rng));
    store.insert(REGION_LN_G, g, Tensor::filled(1, d, 1.0));
    store.insert(REGION_LN_B, g, Tensor::zeros(1, d));
    for l in 1..=dims.fusion_layers {
        for ln in ["ln1", "ln2", "ln3"] {
            store.insert(
                layer_param(l, &format!("{ln}.g")),
                g,
                Tensor::filled(1, d, 1.0),
            );
            store.insert(layer_param(l, &format!("{ln}.b")), g, Tensor::zeros(1, d));
        }
        for attn in ["self", "cross"] {
            for m in ["q", "k", "v", "o"] {
                store.insert(
                    layer_param(l, &format!("{attn}.{m}")),
                    g,
                    gaussian(d, d, sd, rng),
                );
            }
        }
        store.insert(layer_param(l, "ffn.w1"), g, gaussian(d, h, sd, rng));
        store.insert(layer_param(l, "ffn.b1"), g, Tensor::zeros(1, h));
        store.insert(
            layer_param(l, "ffn.w2"),
            g,
            gaussian(h, d, 1.0 / (h as f64).sqrt(), rng),
        );
        store.insert(layer_param(l, "ffn.b2"), g, Tensor::zeros(1, d));
    }
    store.insert(FINAL_LN_G, g, Tensor::filled(1, d, 1.0));
    store.insert(FINAL_LN_B, g, Tensor::zeros(1, d));
    store.insert(SCORE_W, g, gaussian(d, 1, sd, rng));
    store.insert(SCORE_B, g, Tensor::zeros(1, 1));
    store.insert(MLM_W, g, gaussian(d, d, sd, rng));
    store.insert(MLM_B, g, Tensor::zeros(1, d));
    store.insert(MLM_OUT_B, g, Tensor::zeros(1, dims.vocab_size));
}

/// Per-layer, per-head cross-attention keys and values of one region set.
/// Built once per image and shared by every caption fused with it.
pub struct RegionMemory {
    keys: Vec<Vec<Var>>,
    values: Vec<Vec<Var>>,
}

/// Tape-side view of the fusion parameters.
pub struct Fusion<'a> {
    pub dims: &'a ModelDims,
    pub bound: &'a Bound,
}

impl<'a> Fusion<'a> {
    pub fn new(dims: &'a ModelDims, bound: &'a Bound) -> Self {
        Self { dims, bound }
    }

    fn p(&self, name: &str) -> Var {
        self.bound.var(name)
    }

    fn lp(&self, layer: usize, name: &str) -> Var {
        self.bound.var(&layer_param(layer, name))
    }

    fn split_heads(&self, tape: &mut Tape, x: Var) -> Vec<Var> {
        let hd = self.dims.head_dim();
        (0..self.dims.heads)
            .map(|h| tape.slice_cols(x, h * hd, hd))
            .collect()
    }

    fn attend(&self, tape: &mut Tape, q: Var, keys: &[Var], values: &[Var]) -> Var {
        let hd = self.dims.head_dim();
        let qs = self.split_heads(tape, q);
        let outs: Vec<Var> = qs
            .into_iter()
            .zip(keys.iter().zip(values))
            .map(|(qh, (&kh, &vh))| {
                let s = tape.matmul_nt(qh, kh);
                let s = tape.scale(s, 1.0 / (hd as f64).sqrt());
                let a = tape.softmax_rows(s);
                tape.matmul(a, vh)
            })
            .collect();
        if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        }
    }

    pub fn region_memory(&self, tape: &mut Tape, regions: Var) -> RegionMemory {
        let normed = tape.layer_norm(regions, self.p(REGION_LN_G), self.p(REGION_LN_B));
        let mut keys = Vec::with_capacity(self.dims.fusion_layers);
        let mut values = Vec::with_capacity(self.dims.fusion_layers);
        for l in 1..=self.dims.fusion_layers {
            let k = tape.matmul(normed, self.lp(l, "cross.k"));
            let v = tape.matmul(normed, self.lp(l, "cross.v"));
            keys.push(self.split_heads(tape, k));
            values.push(self.split_heads(tape, v));
        }
        RegionMemory { keys, values }
    }

    /// Word states up to and including the first self-attention block. These
    /// depend on the caption alone.
    pub fn caption_prefix(&self, tape: &mut Tape, words: Var) -> Var {
        let n = tape.value(words).rows();
        let pos = tape.slice_rows(self.p(POS), 0, n);
        let x = tape.add(words, pos);
        if self.dims.fusion_layers == 0 {
            return x;
        }
        self.self_block(tape, 1, x)
    }

    fn self_block(&self, tape: &mut Tape, l: usize, x: Var) -> Var {
        let a = tape.layer_norm(x, self.lp(l, "ln1.g"), self.lp(l, "ln1.b"));
        let q = tape.matmul(a, self.lp(l, "self.q"));
        let k = tape.matmul(a, self.lp(l, "self.k"));
        let v = tape.matmul(a, self.lp(l, "self.v"));
        let ks = self.split_heads(tape, k);
        let vs = self.split_heads(tape, v);
        let att = self.attend(tape, q, &ks, &vs);
        let out = tape.matmul(att, self.lp(l, "self.o"));
        tape.add(x, out)
    }

    fn cross_ffn_block(&self, tape: &mut Tape, l: usize, x: Var, mem: &RegionMemory) -> Var {
        let b = tape.layer_norm(x, self.lp(l, "ln2.g"), self.lp(l, "ln2.b"));
        let q = tape.matmul(b, self.lp(l, "cross.q"));
        let att = self.attend(tape, q, &mem.keys[l - 1], &mem.values[l - 1]);
        let out = tape.matmul(att, self.lp(l, "cross.o"));
        let x = tape.add(x, out);

        let c = tape.layer_norm(x, self.lp(l, "ln3.g"), self.lp(l, "ln3.b"));
        let h = tape.matmul(c, self.lp(l, "ffn.w1"));
        let h = tape.add_row(h, self.lp(l, "ffn.b1"));
        let h = tape.tanh(h);
        let h = tape.matmul(h, self.lp(l, "ffn.w2"));
        let h = tape.add_row(h, self.lp(l, "ffn.b2"));
        tape.add(x, h)
    }

    /// Final normalized word states (`n×D`) from a caption prefix.
    pub fn hidden_from_prefix(&self, tape: &mut Tape, prefix: Var, mem: &RegionMemory) -> Var {
        let mut x = prefix;
        for l in 1..=self.dims.fusion_layers {
            if l > 1 {
                x = self.self_block(tape, l, x);
            }
            x = self.cross_ffn_block(tape, l, x, mem);
        }
        tape.layer_norm(x, self.p(FINAL_LN_G), self.p(FINAL_LN_B))
    }

    /// Scalar match score (`1×1`) from final word states.
    pub fn score_head(&self, tape: &mut Tape, hidden: Var) -> Var {
        let pooled = tape.mean_rows(hidden);
        let s = tape.matmul(pooled, self.p(SCORE_W));
        tape.add(s, self.p(SCORE_B))
    }

    pub fn score_from_prefix(&self, tape: &mut Tape, prefix: Var, mem: &RegionMemory) -> Var {
        let h = self.hidden_from_prefix(tape, prefix, mem);
        self.score_head(tape, h)
    }

    /// `B×B` fused scores; entry `(a, b)` pairs image `a` with caption `b`.
    pub fn batch_scores(
        &self,
        tape: &mut Tape,
        memories: &[RegionMemory],
        prefixes: &[Var],
    ) -> Var {
        let b = memories.len();
        assert_eq!(b, prefixes.len(), "one caption per image");
        let mut cells = Vec::with_capacity(b * b);
        for mem in memories {
            for &p in prefixes {
                cells.push(self.score_from_prefix(tape, p, mem));
            }
        }
        tape.stack(&cells, b, b)
    }

    /// Mean masked-token negative log-likelihood. `words` embeds the masked
    /// caption; logits are tied to the embedding table.
    pub fn mlm_loss_var(
        &self,
        tape: &mut Tape,
        words: Var,
        mem: &RegionMemory,
        masked: &MaskedBatch,
    ) -> Var {
        let prefix = self.caption_prefix(tape, words);
        let hidden = self.hidden_from_prefix(tape, prefix, mem);
        let picked = tape.gather_rows(hidden, &masked.positions);
        let t = tape.matmul(picked, self.p(MLM_W));
        let t = tape.add_row(t, self.p(MLM_B));
        let t = tape.tanh(t);
        let logits = tape.matmul_nt(t, self.p(EMBEDDING_TABLE));
        let logits = tape.add_row(logits, self.p(MLM_OUT_B));
        let logp = tape.log_softmax_rows(logits);
        let idx: Vec<(usize, usize)> = masked
            .targets
            .iter()
            .enumerate()
            .map(|(i, &t)| (i, t))
            .collect();
        let ll = tape.take(logp, &idx);
        let m = tape.mean(ll);
        tape.scale(m, -1.0)
    }
}

/// Caption tokens with a masked subset replaced by `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub tokens: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
    /// Distinct, ascending positions.
    pub positions: Vec<usize>,
}

impl MaskedBatch {
    pub fn new(original: &[usize], positions: &[usize]) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyMask);
        }
        let mut pos = positions.to_vec();
        pos.sort_unstable();
        pos.dedup();
        if pos.len() != positions.len() || *pos.last().unwrap() >= original.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask positions {positions:?} invalid for a {}-token caption",
                original.len()
            )));
        }
        let mut tokens = original.to_vec();
        let targets = pos
            .iter()
            .map(|&p| std::mem::replace(&mut tokens[p], MASK_ID))
            .collect();
        Ok(Self {
            tokens,
            targets,
            positions: pos,
        })
    }

    /// Masks `round(rate·n)` tokens, at least one, uniformly without
    /// replacement.
    pub fn random(original: &[usize], rate: f64, rng: &mut impl Rng) -> Result<Self> {
        if original.is_empty() {
            return Err(Error::EmptySide("caption has no tokens"));
        }
        let n = original.len();
        let count = ((rate * n as f64).round() as usize).clamp(1, n);
        let positions = sample(rng, n, count).into_vec();
        Self::new(original, &positions)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStage {
    /// From grounding similarities, before fusion.
    Pre,
    /// From fused scores.
    Post,
}

/// Softmax over the batch's captions for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchDistribution {
    pub probs: Vec<f64>,
    pub stage: MatchStage,
    pub kind: RegionKind,
}

impl MatchDistribution {
    pub fn from_scores(scores: &[f64], stage: MatchStage, kind: RegionKind) -> Result<Self> {
        Ok(Self {
            probs: softmax(scores)?,
            stage,
            kind,
        })
    }
}

fn check_fusion_inputs(model: &Model, regions: &Tensor, words: &Tensor) -> Result<()> {
    let d = model.dims.embed_dim;
    if regions.rows() == 0 || words.rows() == 0 {
        return Err(Error::EmptySide("fusion needs regions and words"));
    }
    if regions.cols() != d || words.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "fusion inputs {:?} and {:?}, model dimension {d}",
            regions.shape(),
            words.shape()
        )));
    }
    if words.rows() > model.dims.max_caption_len {
        return Err(Error::ShapeMismatch(format!(
            "caption of {} tokens exceeds the positional table ({})",
            words.rows(),
            model.dims.max_caption_len
        )));
    }
    Ok(())
}

/// Match score of one (regions, words) pair.
pub fn fuse(regions: &Tensor, words: &Tensor, model: &Model) -> Result<f64> {
    check_fusion_inputs(model, regions, words)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &Default::default());
    let f = Fusion::new(&model.dims, &bound);
    let r = tape.constant(regions.clone());
    let w = tape.constant(words.clone());
    let mem = f.region_memory(&mut tape, r);
    let prefix = f.caption_prefix(&mut tape, w);
    let s = f.score_from_prefix(&mut tape, prefix, &mem);
    Ok(tape.scalar(s))
}

/// Symmetric batch-contrastive loss over fused scores, averaged over the two
/// axes.
pub fn icm_loss(scores: &Tensor) -> Result<f64> {
    Ok(0.5
        * (grounding_loss(scores, Axis::CaptionToImages)?
            + grounding_loss(scores, Axis::ImageToCaptions)?))
}

pub fn icm_loss_var(tape: &mut Tape, scores: Var) -> Var {
    let a = grounding_loss_var(tape, scores, Axis::CaptionToImages);
    let b = grounding_loss_var(tape, scores, Axis::ImageToCaptions);
    let s = tape.add(a, b);
    tape.scale(s, 0.5)
}

/// Masked-token loss for one caption against one region set (already in the
/// model dimension).
pub fn mlm_loss(masked: &MaskedBatch, regions: &Tensor, model: &Model) -> Result<f64> {
    if masked.positions.is_empty() {
        return Err(Error::EmptyMask);
    }
    let table = model.embedding_table();
    if let Some(&id) = masked
        .tokens
        .iter()
        .chain(&masked.targets)
        .find(|&&t| t >= table.rows())
    {
        return Err(Error::UnknownToken {
            id,
            vocab: table.rows(),
        });
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &Default::default());
    let words = tape.gather_rows(bound.var(EMBEDDING_TABLE), &masked.tokens);
    check_fusion_inputs(model, regions, tape.value(words))?;
    let f = Fusion::new(&model.dims, &bound);
    let r = tape.constant(regions.clone());
    let mem = f.region_memory(&mut tape, r);
    let l = f.mlm_loss_var(&mut tape, words, &mem, masked);
    Ok(tape.scalar(l))
}

/// `KL(p_box‖q_box) + KL(p_grid‖q_grid) + KL(p_grid‖q_box)`.
pub fn consistency_loss(
    p_box: &MatchDistribution,
    p_grid: &MatchDistribution,
    q_box: &MatchDistribution,
    q_grid: &MatchDistribution,
) -> Result<f64> {
    Ok(kl_divergence(&p_box.probs, &q_box.probs)?
        + kl_divergence(&p_grid.probs, &q_grid.probs)?
        + kl_divergence(&p_grid.probs, &q_box.probs)?)
}

/// Batch-mean consistency over whichever region kinds are present. Inputs
/// are `B×B` similarity (pre) and fused score (post) matrices; rows are
/// images, softmax runs over captions. With `bidirectional` false the
/// pre-fusion side is a constant target.
pub fn consistency_loss_var(
    tape: &mut Tape,
    pre_box: Option<Var>,
    pre_grid: Option<Var>,
    post_box: Option<Var>,
    post_grid: Option<Var>,
    bidirectional: bool,
) -> Option<Var> {
    let dist = |tape: &mut Tape, v: Option<Var>, target: bool| {
        v.map(|v| {
            let s = tape.softmax_rows(v);
            if target && !bidirectional {
                tape.detach(s)
            } else {
                s
            }
        })
    };
    let p_box = dist(tape, pre_box, true);
    let p_grid = dist(tape, pre_grid, true);
    let q_box = dist(tape, post_box, false);
    let q_grid = dist(tape, post_grid, false);
    let pairs = [(p_box, q_box), (p_grid, q_grid), (p_grid, q_box)];
    let mut terms = Vec::new();
    for (p, q) in pairs {
        if let (Some(p), Some(q)) = (p, q) {
            let kl = tape.kl_rows(p, q);
            terms.push(tape.mean(kl));
        }
    }
    let mut it = terms.into_iter();
    let first = it.next()?;
    Some(it.fold(first, |acc, t| tape.add(acc, t)))
}

/// Unweighted sum of the four stage-one loss components.
pub fn lsm_total_loss(l_g: f64, l_icm: f64, l_mlm: f64, l_cons: f64) -> Result<f64> {
    for (name, v) in [
        ("grounding", l_g),
        ("icm", l_icm),
        ("mlm", l_mlm),
        ("consistency", l_cons),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(format!("{name} = {v}")));
        }
    }
    Ok(l_g + l_icm + l_mlm + l_cons)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{compare_gradients, finite_difference_gradient, FD_STEP};
    use crate::testutil::{random_matrix, tiny_model};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fuse_is_deterministic_and_region_order_free() {
        let model = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let regions = random_matrix(4, 8, 1.0, &mut rng);
        let words = random_matrix(3, 8, 1.0, &mut rng);
        let a = fuse(&regions, &words, &model).unwrap();
        assert_eq!(a, fuse(&regions, &words, &model).unwrap());
        let perm = [2, 0, 3, 1];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| regions.row(i).to_vec()).collect();
        let permuted = Tensor::from_rows(&rows).unwrap();
        assert!((a - fuse(&permuted, &words, &model).unwrap()).abs() < 1e-12);
        assert!(matches!(
            fuse(&Tensor::zeros(2, 5), &words, &model),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn icm_identities() {
        assert_eq!(icm_loss(&Tensor::scalar(3.7)).unwrap(), 0.0);
        let v = icm_loss(&Tensor::filled(4, 4, 0.3)).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            icm_loss(&Tensor::zeros(2, 3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn uniform_mlm_head_gives_log_vocab() {
        let mut model = tiny_model(5);
        for name in [MLM_W, MLM_B, MLM_OUT_B] {
            model.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let regions = random_matrix(3, 8, 1.0, &mut rng);
        let masked = MaskedBatch::new(&[4, 5, 6, 7], &[1, 3]).unwrap();
        let l = mlm_loss(&masked, &regions, &model).unwrap();
        assert!((l - (model.dims.vocab_size as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_mlm_head_gives_zero_loss() {
        let mut model = tiny_model(5);
        model.params.get_mut(MLM_W).unwrap().data_mut().fill(0.0);
        model.params.get_mut(MLM_B).unwrap().data_mut().fill(0.0);
        let bias = model.params.get_mut(MLM_OUT_B).unwrap();
        bias.data_mut().fill(0.0);
        bias.data_mut()[6] = 100.0;
        let regions = Tensor::filled(2, 8, 0.5);
        let masked = MaskedBatch::new(&[4, 6, 7], &[1]).unwrap();
        assert!(mlm_loss(&masked, &regions, &model).unwrap() < 1e-10);
    }

    #[test]
    fn mask_contract() {
        assert!(matches!(
            MaskedBatch::new(&[3, 4], &[]),
            Err(Error::EmptyMask)
        ));
        assert!(MaskedBatch::new(&[3, 4], &[1, 1]).is_err());
        assert!(MaskedBatch::new(&[3, 4], &[2]).is_err());
        let m = MaskedBatch::new(&[3, 4, 5], &[2, 0]).unwrap();
        assert_eq!(m.tokens, vec![MASK_ID, 4, MASK_ID]);
        assert_eq!(m.targets, vec![3, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 1..30 {
            let toks: Vec<usize> = (0..n).map(|i| i + 2).collect();
            let m = MaskedBatch::random(&toks, MASK_RATE, &mut rng).unwrap();
            assert_eq!(
                m.positions.len(),
                ((0.15 * n as f64).round() as usize).max(1)
            );
        }
    }

    #[test]
    fn consistency_term_isolation() {
        let d = |p: &[f64], stage, kind| MatchDistribution {
            probs: p.to_vec(),
            stage,
            kind,
        };
        let a = [0.1, 0.2, 0.3, 0.4];
        let b = [0.25, 0.25, 0.4, 0.1];
        let same = consistency_loss(
            &d(&a, MatchStage::Pre, RegionKind::Box),
            &d(&a, MatchStage::Pre, RegionKind::Grid),
            &d(&a, MatchStage::Post, RegionKind::Box),
            &d(&a, MatchStage::Post, RegionKind::Grid),
        )
        .unwrap();
        assert_eq!(same, 0.0);
        // p_box = q_box = b, p_grid = q_grid = a: only the cross term remains
        let cross = consistency_loss(
            &d(&b, MatchStage::Pre, RegionKind::Box),
            &d(&a, MatchStage::Pre, RegionKind::Grid),
            &d(&b, MatchStage::Post, RegionKind::Box),
            &d(&a, MatchStage::Post, RegionKind::Grid),
        )
        .unwrap();
        assert_eq!(cross, kl_divergence(&a, &b).unwrap());
        let short = d(&a[..3], MatchStage::Post, RegionKind::Grid);
        assert!(consistency_loss(
            &d(&a, MatchStage::Pre, RegionKind::Box),
            &d(&a, MatchStage::Pre, RegionKind::Grid),
            &d(&a, MatchStage::Post, RegionKind::Box),
            &short
        )
        .is_err());
    }

    #[test]
    fn total_loss_sums_and_rejects_non_finite() {
        assert_eq!(lsm_total_loss(0.0, 0.0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(lsm_total_loss(1.0, 2.0, 3.0, 4.0).unwrap(), 10.0);
        assert!(matches!(
            lsm_total_loss(1.0, f64::NAN, 0.0, 0.0),
            Err(Error::NonFiniteLoss(_))
        ));
    }

    #[test]
    fn fused_score_gradient_matches_finite_differences() {
        let model = tiny_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let regions = random_matrix(3, 8, 1.0, &mut rng);
        let words = random_matrix(4, 8, 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &Default::default());
        let f = Fusion::new(&model.dims, &bound);
        let r = tape.param(regions.clone());
        let w = tape.constant(words.clone());
        let mem = f.region_memory(&mut tape, r);
        let p = f.caption_prefix(&mut tape, w);
        let s = f.score_from_prefix(&mut tape, p, &mem);
        let g = tape.backward(s).unwrap();
        let numeric =
            finite_difference_gradient(|x| fuse(x, &words, &model), &regions, FD_STEP).unwrap();
        assert!(compare_gradients(g.get(r).unwrap().data(), numeric.data()).passes());
    }
}
