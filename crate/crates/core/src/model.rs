//! Model parameters: the staged region encoder, the projection into the text
//! space, the word-embedding table and the cross-attention fusion model.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::embeddings::{
    class_averaging_matrix, class_embeddings_var, project_var, EMBEDDING_TABLE, PROJECTION_BIAS,
    PROJECTION_WEIGHT,
};
use crate::error::{Error, Result};
use crate::fusion;
use crate::params::{Bound, ParamGroup, ParamStore};

pub const ENCODER_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Raw region-feature dimension.
    pub feature_dim: usize,
    /// Text-embedding and fusion model dimension.
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_caption_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            feature_dim: 48,
            embed_dim: 64,
            vocab_size: 0,
            fusion_layers: 6,
            heads: 8,
            ffn_hidden: 128,
            max_caption_len: 16,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("vocab_size", self.vocab_size),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("max_caption_len", self.max_caption_len),
        ] {
            if v == 0 {
                return Err(Error::invalid_config(field, "must be at least 1"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid_config(
                "heads",
                format!(
                    "embed_dim {} is not divisible by {} heads",
                    self.embed_dim, self.heads
                ),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub embedding_std: f64,
    /// Std of the encoder stage weights, relative to `1/sqrt(F)`.
    pub encoder_gain: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            embedding_std: 0.02,
            encoder_gain: 0.5,
        }
    }
}

pub fn encoder_weight(stage: usize) -> String {
    format!("encoder.stage{stage}.w")
}

pub fn encoder_bias(stage: usize) -> String {
    format!("encoder.stage{stage}.b")
}

pub(crate) fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| normal.sample(rng)).collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub params: ParamStore,
}

impl Model {
    pub fn init(dims: ModelDims, init: &InitConfig, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let f = dims.feature_dim;
        let d = dims.embed_dim;
        let mut params = ParamStore::new();
        for s in 1..=ENCODER_STAGES {
            let group = ParamGroup::encoder_stage(s);
            params.insert(
                encoder_weight(s),
                group,
                gaussian(f, f, init.encoder_gain / (f as f64).sqrt(), rng),
            );
            params.insert(encoder_bias(s), group, Tensor::zeros(1, f));
        }
        params.insert(
            PROJECTION_WEIGHT,
            ParamGroup::Projection,
            gaussian(f, d, 1.0 / (f as f64).sqrt(), rng),
        );
        params.insert(PROJECTION_BIAS, ParamGroup::Projection, Tensor::zeros(1, d));
        params.insert(
            EMBEDDING_TABLE,
            ParamGroup::Embedding,
            gaussian(dims.vocab_size, d, init.embedding_std, rng),
        );
        fusion::init_params(&mut params, &dims, rng);
        params.round_to_f32();
        Ok(Self { dims, params })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: &BTreeSet<ParamGroup>) -> Bound {
        self.params.bind(tape, trainable)
    }

    pub fn embedding_table(&self) -> &Tensor {
        self.params
            .get(EMBEDDING_TABLE)
            .expect("embedding table present")
    }

    /// Encoder stages then projection: `N×F` raw features to `N×D`.
    pub fn encode_regions(&self, raw: &Tensor) -> Result<Tensor> {
        self.check_features(raw)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &BTreeSet::new());
        let x = tape.constant(raw.clone());
        let r = encode_var(&mut tape, &bound, x);
        Ok(tape.value(r).clone())
    }

    /// Raw features after the four encoder stages, before projection.
    pub fn encoder_features(&self, raw: &Tensor) -> Result<Tensor> {
        self.check_features(raw)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &BTreeSet::new());
        let x = tape.constant(raw.clone());
        let h = encoder_stages_var(&mut tape, &bound, x);
        Ok(tape.value(h).clone())
    }

    /// Stacked class embeddings (`K×D`) for token sequences.
    pub fn class_embeddings(&self, classes: &[Vec<usize>]) -> Result<Tensor> {
        let a = class_averaging_matrix(classes, self.dims.vocab_size)?;
        let mut tape = Tape::new();
        let table = tape.constant(self.embedding_table().clone());
        let c = class_embeddings_var(&mut tape, table, &a);
        Ok(tape.value(c).clone())
    }

    pub fn check_features(&self, raw: &Tensor) -> Result<()> {
        if raw.shape().len() != 2 || raw.cols() != self.dims.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "region features {:?}, model expects N×{}",
                raw.shape(),
                self.dims.feature_dim
            )));
        }
        Ok(())
    }
}

/// Residual stages `h ← h + tanh(h W_s + b_s)`.
pub fn encoder_stages_var(tape: &mut Tape, bound: &Bound, x: Var) -> Var {
    let mut h = x;
    for s in 1..=ENCODER_STAGES {
        let lin = tape.matmul(h, bound.var(&encoder_weight(s)));
        let lin = tape.add_row(lin, bound.var(&encoder_bias(s)));
        let act = tape.tanh(lin);
        h = tape.add(h, act);
    }
    h
}

pub fn encode_var(tape: &mut Tape, bound: &Bound, x: Var) -> Var {
    let h = encoder_stages_var(tape, bound, x);
    project_var(
        tape,
        h,
        bound.var(PROJECTION_WEIGHT),
        bound.var(PROJECTION_BIAS),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::tiny_dims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seeded_and_grouped() {
        let a = Model::init(
            tiny_dims(),
            &InitConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let b = Model::init(
            tiny_dims(),
            &InitConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params.groups().len(), ParamGroup::ALL.len());
        assert_eq!(a.embedding_table().shape(), &[12, 8]);
    }

    #[test]
    fn heads_must_divide_dim() {
        let dims = ModelDims {
            heads: 3,
            ..tiny_dims()
        };
        match Model::init(
            dims,
            &InitConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        ) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "heads"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn encoding_shapes_and_errors() {
        let m = Model::init(
            tiny_dims(),
            &InitConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let raw = Tensor::matrix(3, 5, (0..15).map(|i| i as f64 * 0.1).collect());
        assert_eq!(m.encode_regions(&raw).unwrap().shape(), &[3, 8]);
        assert!(matches!(
            m.encode_regions(&Tensor::zeros(2, 4)),
            Err(Error::ShapeMismatch(_))
        ));
        let c = m.class_embeddings(&[vec![3], vec![4, 5]]).unwrap();
        let t = m.embedding_table();
        assert_eq!(c.row(0), t.row(3));
        for d in 0..8 {
            assert!((c.get(1, d) - 0.5 * (t.get(4, d) + t.get(5, d))).abs() < 1e-15);
        }
    }
}
