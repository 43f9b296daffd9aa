//! Token vocabulary, the word-embedding table, class-embedding construction
//! and the affine projection from region features into the text space.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;

pub const EMBEDDING_TABLE: &str = "embedding.table";
pub const PROJECTION_WEIGHT: &str = "projection.w";
pub const PROJECTION_BIAS: &str = "projection.b";

/// Closed token set with dense ids. Ids 0 and 1 are padding and mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from content tokens; the reserved tokens are
    /// prepended.
    pub fn new<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = [PAD_TOKEN.to_string(), MASK_TOKEN.to_string()]
            .into_iter()
            .chain(content.into_iter().map(Into::into))
            .collect();
        Self::from_token_list(tokens)
    }

    fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[MASK_ID] != MASK_TOKEN {
            return Err(Error::Dataset(
                "vocabulary must start with [PAD], [MASK]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Dataset(format!("bad token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Dataset(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownTokenString(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::UnknownToken {
                id,
                vocab: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenization over the closed vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// One token per line, UTF-8, in id order.
    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_token_list(text.lines().map(str::to_string).collect())
    }
}

/// `V × D` word vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Tensor,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn random(vocab: usize, dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..vocab * dim).map(|_| normal.sample(rng)).collect();
        Self {
            weights: Tensor::matrix(vocab, dim, data),
            trainable: false,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Affine map `F → D`: `r = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub trainable: bool,
}

impl ProjectionLayer {
    pub fn random(input_dim: usize, output_dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("finite std");
        let data = (0..input_dim * output_dim)
            .map(|_| normal.sample(rng))
            .collect();
        Self {
            weight: Tensor::matrix(input_dim, output_dim, data),
            bias: Tensor::zeros(1, output_dim),
            trainable: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

fn check_ids(tokens: &[usize], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&id) => Err(Error::UnknownToken { id, vocab }),
        None => Ok(()),
    }
}

/// Non-padding token ids, order preserved.
pub fn strip_padding(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| t != PAD_ID).collect()
}

/// Stacks the table rows of every non-padding token.
pub fn embed_caption(tokens: &[usize], table: &EmbeddingTable) -> Result<Tensor> {
    check_ids(tokens, table.vocab_size())?;
    let ids = strip_padding(tokens);
    if ids.is_empty() {
        return Err(Error::EmptySide("caption has no tokens"));
    }
    let d = table.dim();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &i in &ids {
        data.extend_from_slice(table.weights.row(i));
    }
    Ok(Tensor::matrix(ids.len(), d, data))
}

/// Arithmetic mean of the class name's token vectors.
pub fn class_embedding(class_tokens: &[usize], table: &EmbeddingTable) -> Result<Vec<f64>> {
    if class_tokens.is_empty() {
        return Err(Error::EmptyClassName);
    }
    check_ids(class_tokens, table.vocab_size())?;
    let d = table.dim();
    let mut mean = vec![0.0; d];
    for &t in class_tokens {
        for (m, v) in mean.iter_mut().zip(table.weights.row(t)) {
            *m += v;
        }
    }
    let n = class_tokens.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Maps each raw region feature row to the text-embedding space.
pub fn project_regions(raw: &Tensor, proj: &ProjectionLayer) -> Result<Tensor> {
    if raw.cols() != proj.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "region features have dimension {}, projection expects {}",
            raw.cols(),
            proj.input_dim()
        )));
    }
    let (n, f, d) = (raw.rows(), proj.input_dim(), proj.output_dim());
    let mut out = vec![0.0; n * d];
    crate::diffcore::gemm(
        n,
        f,
        d,
        raw.data(),
        false,
        proj.weight.data(),
        false,
        &mut out,
        false,
    );
    for row in out.chunks_mut(d) {
        for (o, b) in row.iter_mut().zip(proj.bias.data()) {
            *o += b;
        }
    }
    Ok(Tensor::matrix(n, d, out))
}

/// Averaging matrix `A` (`classes × V`) such that `A · E` stacks the class
/// embeddings of `E`.
pub fn class_averaging_matrix(classes: &[Vec<usize>], vocab: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * vocab];
    for (k, toks) in classes.iter().enumerate() {
        if toks.is_empty() {
            return Err(Error::EmptyClassName);
        }
        check_ids(toks, vocab)?;
        let w = 1.0 / toks.len() as f64;
        for &t in toks {
            data[k * vocab + t] += w;
        }
    }
    Ok(Tensor::matrix(classes.len(), vocab, data))
}

/// Tape version of [`embed_caption`] for already-validated ids.
pub fn embed_caption_var(tape: &mut Tape, table: Var, tokens: &[usize]) -> Var {
    tape.gather_rows(table, tokens)
}

/// Tape version of [`class_embedding`] for a whole class list.
pub fn class_embeddings_var(tape: &mut Tape, table: Var, averaging: &Tensor) -> Var {
    let a = tape.constant(averaging.clone());
    tape.matmul(a, table)
}

/// Tape version of [`project_regions`].
pub fn project_var(tape: &mut Tape, features: Var, weight: Var, bias: Var) -> Var {
    let lin = tape.matmul(features, weight);
    tape.add_row(lin, bias)
}
