//! Fine-grained image-caption similarity and the symmetric in-batch
//! grounding loss, applied separately to box and grid regions.
//!
//! For an image with projected regions `r_i` and a caption with word vectors
//! `w_j`:
//!
//! ```text
//! d_ij       = softmax_j(r_i · w_j)
//! sim(I, C)  = (1/|R|) Σ_i Σ_j d_ij (r_i · w_j)
//! L_G(I)     = -log softmax_C'(sim(I, C'))[C]
//! ```
//!
//! The batch loss is the mean of `L_G(I)` over images (and of `L_G(C)` over
//! captions for the other axis). The total grounding loss adds both axes for
//! both region kinds.

use crate::diffcore::{self, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::regions::RegionKind;

/// Direction of the batch softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Each image against every caption (rows).
    ImageToCaptions,
    /// Each caption against every image (columns).
    CaptionToImages,
}

/// `B × B` similarities; entry `(a, b)` is `sim(I_a, C_b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSimilarityMatrix {
    pub values: Tensor,
    pub kind: RegionKind,
}

impl BatchSimilarityMatrix {
    pub fn new(values: Tensor, kind: RegionKind) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != values.cols() {
            return Err(Error::ShapeMismatch(format!(
                "batch similarity must be square, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values, kind })
    }

    pub fn batch_size(&self) -> usize {
        self.values.rows()
    }
}

fn check_sides(regions: &Tensor, words: &Tensor) -> Result<()> {
    if regions.is_empty() {
        return Err(Error::EmptySide("regions"));
    }
    if words.is_empty() {
        return Err(Error::EmptySide("words"));
    }
    if regions.cols() != words.cols() {
        return Err(Error::ShapeMismatch(format!(
            "region dim {} vs word dim {}",
            regions.cols(),
            words.cols()
        )));
    }
    Ok(())
}

fn dot_matrix(regions: &Tensor, words: &Tensor) -> Vec<f64> {
    let (n, m, d) = (regions.rows(), words.rows(), regions.cols());
    let mut out = vec![0.0; n * m];
    diffcore::gemm(
        n,
        d,
        m,
        regions.data(),
        false,
        words.data(),
        true,
        &mut out,
        false,
    );
    out
}

/// `|R| × |W|` matrix of per-region softmax weights over caption words.
pub fn alignment_weights(regions: &Tensor, words: &Tensor) -> Result<Tensor> {
    check_sides(regions, words)?;
    let m = words.rows();
    let dots = dot_matrix(regions, words);
    let mut out = Vec::with_capacity(dots.len());
    for row in dots.chunks(m) {
        out.extend(diffcore::softmax(row)?);
    }
    Ok(Tensor::matrix(regions.rows(), m, out))
}

/// Mean over regions of the alignment-weighted region-word dot products.
pub fn image_caption_similarity(regions: &Tensor, words: &Tensor) -> Result<f64> {
    check_sides(regions, words)?;
    let m = words.rows();
    let dots = dot_matrix(regions, words);
    let mut total = 0.0;
    for row in dots.chunks(m) {
        let d = diffcore::softmax(row)?;
        total += d.iter().zip(row).map(|(w, s)| w * s).sum::<f64>();
    }
    Ok(total / regions.rows() as f64)
}

/// Mean over the batch of `-log softmax(diagonal)` along `axis`.
pub fn grounding_loss(batch: &Tensor, axis: Axis) -> Result<f64> {
    if batch.shape().len() != 2 || batch.rows() != batch.cols() {
        return Err(Error::ShapeMismatch(format!(
            "grounding loss needs a square matrix, got {:?}",
            batch.shape()
        )));
    }
    let b = batch.rows();
    let mut total = 0.0;
    for i in 0..b {
        let line: Vec<f64> = match axis {
            Axis::ImageToCaptions => batch.row(i).to_vec(),
            Axis::CaptionToImages => (0..b).map(|r| batch.get(r, i)).collect(),
        };
        total += diffcore::log_sum_exp(&line)? - line[i];
    }
    Ok(total / b as f64)
}

/// Four-term sum: both axes for box and grid similarity matrices.
pub fn total_grounding_loss(
    box_batch: &BatchSimilarityMatrix,
    grid_batch: &BatchSimilarityMatrix,
) -> Result<f64> {
    if box_batch.batch_size() != grid_batch.batch_size() {
        return Err(Error::ShapeMismatch(format!(
            "box batch {} vs grid batch {}",
            box_batch.batch_size(),
            grid_batch.batch_size()
        )));
    }
    Ok(grounding_loss(&box_batch.values, Axis::CaptionToImages)?
        + grounding_loss(&box_batch.values, Axis::ImageToCaptions)?
        + grounding_loss(&grid_batch.values, Axis::CaptionToImages)?
        + grounding_loss(&grid_batch.values, Axis::ImageToCaptions)?)
}

/// Tape version of [`image_caption_similarity`] given the region-word dot
/// matrix; returns a `1×1` node.
pub fn similarity_from_dots(tape: &mut Tape, dots: Var) -> Var {
    let n = tape.value(dots).rows();
    let d = tape.softmax_rows(dots);
    let weighted = tape.mul(d, dots);
    let s = tape.sum(weighted);
    tape.scale(s, 1.0 / n as f64)
}

/// Tape version of [`image_caption_similarity`].
pub fn similarity_var(tape: &mut Tape, regions: Var, words: Var) -> Var {
    let dots = tape.matmul_nt(regions, words);
    similarity_from_dots(tape, dots)
}

/// `B × B` similarity node for per-image region matrices and per-caption
/// word matrices.
pub fn batch_similarity_var(tape: &mut Tape, regions: &[Var], words: &[Var]) -> Var {
    let b = regions.len();
    assert_eq!(b, words.len(), "one caption per image");
    let lengths: Vec<usize> = words.iter().map(|&w| tape.value(w).rows()).collect();
    let all_words = tape.concat_rows(words);
    let mut cells = Vec::with_capacity(b * b);
    for &r in regions {
        let dots = tape.matmul_nt(r, all_words);
        let mut start = 0;
        for &len in &lengths {
            let block = tape.slice_cols(dots, start, len);
            cells.push(similarity_from_dots(tape, block));
            start += len;
        }
    }
    tape.stack(&cells, b, b)
}

/// Tape version of [`grounding_loss`].
pub fn grounding_loss_var(tape: &mut Tape, batch: Var, axis: Axis) -> Var {
    let b = tape.value(batch).rows();
    let oriented = match axis {
        Axis::ImageToCaptions => batch,
        Axis::CaptionToImages => tape.transpose(batch),
    };
    let logp = tape.log_softmax_rows(oriented);
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let picked = tape.take(logp, &diag);
    let m = tape.mean(picked);
    tape.scale(m, -1.0)
}

/// Both axes of one similarity node, summed.
pub fn symmetric_grounding_var(tape: &mut Tape, batch: Var) -> Var {
    let a = grounding_loss_var(tape, batch, Axis::CaptionToImages);
    let b = grounding_loss_var(tape, batch, Axis::ImageToCaptions);
    tape.add(a, b)
}
