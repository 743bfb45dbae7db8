//! Modality encoders: linear projections for images and tag bags, and a
//! word-table + GRU pipeline for sentences.
//!
//! The joint space has dimension D. Image features (dim V) and tag bags
//! (dim `word_dim`) enter through single projections W_image and W_tag;
//! sentences run token by token through a GRU whose final hidden state is
//! projected by W_sentence. Word embeddings and the GRU are trainable;
//! image features and tag word vectors are frozen inputs.
//!
//! The GRU convention is fixed here (the usual update/reset form) and its
//! tag is written into every checkpoint so saved models are unambiguous:
//!
//! ```text
//! z  = sigmoid(W_z x + U_z h + b_z)
//! r  = sigmoid(W_r x + U_r h + b_r)
//! h~ = tanh(W_h x + U_h (r ⊙ h) + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h~
//! ```

mod backprop;
mod checkpoint;

pub use backprop::{backprop_image, backprop_sentence, backprop_tag_bag, SentenceCache};
pub use checkpoint::{load_model, save_model};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{matvec, ParameterSet, RealMatrix, RealVector, Tensor};

/// Identifier of the GRU equations above, recorded in checkpoints.
pub const GRU_CONVENTION: &str = "zr-convex-update-v1";

/// Reserved token for out-of-vocabulary words. Unknown tokens share one
/// trainable row rather than being dropped, preserving sentence length.
pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Canonical parameter names inside an [`EmbeddingModel`]'s parameter set.
pub const PARAM_NAMES: [&str; 13] = [
    "gru.b_h", "gru.b_r", "gru.b_z", "gru.u_h", "gru.u_r", "gru.u_z", "gru.w_h", "gru.w_r",
    "gru.w_z", "w_image", "w_sentence", "w_tag", "word_table",
];

/// Parameter names that belong to the sentence pathway (everything the
/// image-tag-only training stage must leave untouched).
pub const SENTENCE_PARAMS: [&str; 11] = [
    "gru.b_h", "gru.b_r", "gru.b_z", "gru.u_h", "gru.u_r", "gru.u_z", "gru.w_h", "gru.w_r",
    "gru.w_z", "w_sentence", "word_table",
];

/// Token-string to row-id map for the trainable word table. Row 0 is always
/// [`UNKNOWN_TOKEN`]; known tokens occupy rows 1.. in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from any iterator of tokens; duplicates collapse.
    pub fn build<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut unique: Vec<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| t != UNKNOWN_TOKEN)
            .collect();
        unique.sort();
        unique.dedup();
        let mut all = Vec::with_capacity(unique.len() + 1);
        all.push(UNKNOWN_TOKEN.to_string());
        all.extend(unique);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens: all, index }
    }

    /// Restores a vocabulary from an explicit row-order token list
    /// (checkpoint loading). Row 0 must be the unknown token.
    pub fn from_rows(rows: Vec<String>) -> Result<Self> {
        if rows.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            return Err(Error::Validation(format!(
                "vocabulary row 0 must be {UNKNOWN_TOKEN}"
            )));
        }
        let mut index = BTreeMap::new();
        for (i, t) in rows.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocabulary { tokens: rows, index })
    }

    /// Row id for a token; unknown tokens map to row 0.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // row 0 always exists
    }

    /// Tokens in row order (row 0 = unknown).
    pub fn rows(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Ordered token ids for one sentence; encoding requires length ≥ 1.
pub type TokenSequence = Vec<usize>;

/// Shape bundle for a model: joint dim D, GRU hidden dim D_h, image feature
/// dim V, and the word-embedding dim shared by the word table and tag bags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d: usize,
    pub d_h: usize,
    pub v: usize,
    pub word_dim: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("d", self.d),
            ("d_h", self.d_h),
            ("v", self.v),
            ("word_dim", self.word_dim),
        ] {
            if value == 0 {
                return Err(Error::Validation(format!("model dim {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// The full trainable model: three projections, GRU cell, word table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub dims: ModelDims,
    pub vocab: Vocabulary,
    /// Whether joint-space embeddings are L2-normalized before storage and
    /// retrieval. Cosine scoring makes both choices equivalent for ranking;
    /// the flag is recorded in checkpoints so embeddings are reproducible.
    pub normalize_joint: bool,
    pub seed: u64,
    pub params: ParameterSet,
}

impl EmbeddingModel {
    /// Seed-controlled initialization: matrices uniform in
    /// (−1/√fan_in, +1/√fan_in), biases zero, word-table rows uniform in
    /// (−1/√word_dim, +1/√word_dim).
    pub fn new(dims: ModelDims, vocab: Vocabulary, seed: u64) -> Result<Self> {
        Self::with_word_init(dims, vocab, seed, &BTreeMap::new())
    }

    /// Like [`EmbeddingModel::new`], but word-table rows whose token appears
    /// in `word_init` start from that vector instead of random values.
    /// Starting the trainable table from pretrained word vectors ties the
    /// sentence pathway to the same geometry the (frozen) tag bags live in.
    pub fn with_word_init(
        dims: ModelDims,
        vocab: Vocabulary,
        seed: u64,
        word_init: &BTreeMap<String, RealVector>,
    ) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform_matrix = |rows: usize, cols: usize, fan_in: usize| -> RealMatrix {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let values = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            RealMatrix::new(rows, cols, values).expect("sized by construction")
        };

        let mut params = ParameterSet::new();
        // Registration order is irrelevant (the set sorts by name) but the
        // RNG draw order below is part of the reproducibility contract.
        let w_image = uniform_matrix(dims.d, dims.v, dims.v);
        let w_sentence = uniform_matrix(dims.d, dims.d_h, dims.d_h);
        let w_tag = uniform_matrix(dims.d, dims.word_dim, dims.word_dim);
        let gru_w = [
            uniform_matrix(dims.d_h, dims.word_dim, dims.word_dim),
            uniform_matrix(dims.d_h, dims.word_dim, dims.word_dim),
            uniform_matrix(dims.d_h, dims.word_dim, dims.word_dim),
        ];
        let gru_u = [
            uniform_matrix(dims.d_h, dims.d_h, dims.d_h),
            uniform_matrix(dims.d_h, dims.d_h, dims.d_h),
            uniform_matrix(dims.d_h, dims.d_h, dims.d_h),
        ];
        let mut word_table = uniform_matrix(vocab.len(), dims.word_dim, dims.word_dim);
        for (token, vector) in word_init {
            if vector.dim() != dims.word_dim {
                return Err(Error::Shape(format!(
                    "word init for '{token}' has dim {}, expected {}",
                    vector.dim(),
                    dims.word_dim
                )));
            }
            if vocab.contains(token) {
                word_table.row_mut(vocab.id(token)).copy_from_slice(vector.as_slice());
            }
        }

        params.register("w_image", Tensor::Matrix(w_image))?;
        params.register("w_sentence", Tensor::Matrix(w_sentence))?;
        params.register("w_tag", Tensor::Matrix(w_tag))?;
        for (name, m) in ["gru.w_z", "gru.w_r", "gru.w_h"].iter().zip(gru_w) {
            params.register(name, Tensor::Matrix(m))?;
        }
        for (name, m) in ["gru.u_z", "gru.u_r", "gru.u_h"].iter().zip(gru_u) {
            params.register(name, Tensor::Matrix(m))?;
        }
        for name in ["gru.b_z", "gru.b_r", "gru.b_h"] {
            params.register(name, Tensor::Vector(RealVector::zeros(dims.d_h)))?;
        }
        params.register("word_table", Tensor::Matrix(word_table))?;

        Ok(EmbeddingModel {
            dims,
            vocab,
            normalize_joint: false,
            seed,
            params,
        })
    }

    /// Borrowed view of the GRU cell weights.
    pub fn gru(&self) -> GruCellParams<'_> {
        GruCellParams {
            w_z: self.params.matrix("gru.w_z"),
            w_r: self.params.matrix("gru.w_r"),
            w_h: self.params.matrix("gru.w_h"),
            u_z: self.params.matrix("gru.u_z"),
            u_r: self.params.matrix("gru.u_r"),
            u_h: self.params.matrix("gru.u_h"),
            b_z: self.params.vector("gru.b_z"),
            b_r: self.params.vector("gru.b_r"),
            b_h: self.params.vector("gru.b_h"),
        }
    }

    /// Word-table row for a token id, as a vector.
    pub fn word_vector(&self, id: usize) -> RealVector {
        RealVector::new(self.params.matrix("word_table").row(id).to_vec())
    }

    /// Token ids for a tokenized sentence (unknowns map to row 0).
    pub fn token_ids(&self, tokens: &[String]) -> TokenSequence {
        self.vocab.ids(tokens)
    }

    /// Applies the model's storage convention to a raw joint-space vector:
    /// identity when `normalize_joint` is off, L2 normalization when on.
    pub fn storage_embedding(&self, raw: RealVector) -> Result<RealVector> {
        if !self.normalize_joint {
            return Ok(raw);
        }
        let n = crate::numerics::l2_norm(&raw);
        if n == 0.0 {
            return Err(Error::Degenerate(
                "cannot normalize zero-norm joint embedding".into(),
            ));
        }
        Ok(raw.scaled(1.0 / n))
    }
}

/// Borrowed GRU cell weights: input-to-hidden W_*, hidden-to-hidden U_*,
/// biases b_* for the update gate z, reset gate r, and candidate h~.
#[derive(Debug, Clone, Copy)]
pub struct GruCellParams<'a> {
    pub w_z: &'a RealMatrix,
    pub w_r: &'a RealMatrix,
    pub w_h: &'a RealMatrix,
    pub u_z: &'a RealMatrix,
    pub u_r: &'a RealMatrix,
    pub u_h: &'a RealMatrix,
    pub b_z: &'a RealVector,
    pub b_r: &'a RealVector,
    pub b_h: &'a RealVector,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One GRU step: returns h' given the previous hidden state and one input.
pub fn gru_step(p: &GruCellParams, h: &RealVector, x: &RealVector) -> Result<RealVector> {
    Ok(gru_step_full(p, h, x)?.h_next)
}

/// Intermediate activations of one step, kept for backprop.
#[derive(Debug, Clone)]
pub struct GruStepState {
    pub z: RealVector,
    pub r: RealVector,
    pub h_tilde: RealVector,
    pub h_next: RealVector,
}

pub(crate) fn gru_step_full(
    p: &GruCellParams,
    h: &RealVector,
    x: &RealVector,
) -> Result<GruStepState> {
    if h.dim() != p.u_z.rows() {
        return Err(Error::Shape(format!(
            "gru_step: hidden state dim {} vs cell D_h {}",
            h.dim(),
            p.u_z.rows()
        )));
    }
    let d_h = h.dim();

    let mut z = matvec(p.w_z, x)?;
    z.axpy(1.0, &matvec(p.u_z, h)?);
    z.axpy(1.0, p.b_z);
    for v in z.as_mut_slice() {
        *v = sigmoid(*v);
    }

    let mut r = matvec(p.w_r, x)?;
    r.axpy(1.0, &matvec(p.u_r, h)?);
    r.axpy(1.0, p.b_r);
    for v in r.as_mut_slice() {
        *v = sigmoid(*v);
    }

    let mut rh = RealVector::zeros(d_h);
    for k in 0..d_h {
        rh[k] = r[k] * h[k];
    }
    let mut h_tilde = matvec(p.w_h, x)?;
    h_tilde.axpy(1.0, &matvec(p.u_h, &rh)?);
    h_tilde.axpy(1.0, p.b_h);
    for v in h_tilde.as_mut_slice() {
        *v = v.tanh();
    }

    let mut h_next = RealVector::zeros(d_h);
    for k in 0..d_h {
        h_next[k] = (1.0 - z[k]) * h[k] + z[k] * h_tilde[k];
    }
    Ok(GruStepState { z, r, h_tilde, h_next })
}

/// Projects an image feature into the joint space: i = W_image · feat.
pub fn encode_image(model: &EmbeddingModel, feat: &RealVector) -> Result<RealVector> {
    if feat.dim() != model.dims.v {
        return Err(Error::Shape(format!(
            "encode_image: feature dim {} vs model V {}",
            feat.dim(),
            model.dims.v
        )));
    }
    matvec(model.params.matrix("w_image"), feat)
}

/// Runs the GRU over a token sequence from h0 = 0 and projects the final
/// hidden state: s = W_sentence · h_T.
pub fn encode_sentence(model: &EmbeddingModel, tokens: &TokenSequence) -> Result<RealVector> {
    Ok(encode_sentence_cached(model, tokens)?.0)
}

/// As [`encode_sentence`], but also returns the per-step activations needed
/// to backpropagate through the sequence.
pub fn encode_sentence_cached(
    model: &EmbeddingModel,
    tokens: &TokenSequence,
) -> Result<(RealVector, SentenceCache)> {
    if tokens.is_empty() {
        return Err(Error::Empty("encode_sentence on empty token sequence".into()));
    }
    let table = model.params.matrix("word_table");
    for &id in tokens {
        if id >= table.rows() {
            return Err(Error::Parameter(format!(
                "token id {id} out of word-table range {}",
                table.rows()
            )));
        }
    }
    let gru = model.gru();
    let mut h = RealVector::zeros(model.dims.d_h);
    let mut cache = SentenceCache::with_capacity(tokens.len());
    for &id in tokens {
        let x = RealVector::new(table.row(id).to_vec());
        let state = gru_step_full(&gru, &h, &x)?;
        cache.push(id, h, x, &state);
        h = state.h_next;
    }
    let s = matvec(model.params.matrix("w_sentence"), &h)?;
    cache.finish(h);
    Ok((s, cache))
}

/// Averages tag word vectors into a bag and projects it: t = W_tag · t̄.
pub fn encode_tags(model: &EmbeddingModel, tag_vectors: &[RealVector]) -> Result<RealVector> {
    let t_bar = mean_vector(tag_vectors)?;
    project_tag_bag(model, &t_bar)
}

/// Projects an already-averaged tag bag.
pub fn project_tag_bag(model: &EmbeddingModel, t_bar: &RealVector) -> Result<RealVector> {
    if t_bar.dim() != model.dims.word_dim {
        return Err(Error::Shape(format!(
            "tag bag dim {} vs model word_dim {}",
            t_bar.dim(),
            model.dims.word_dim
        )));
    }
    matvec(model.params.matrix("w_tag"), t_bar)
}

/// Elementwise mean of a nonempty list of same-dim vectors.
pub fn mean_vector(vectors: &[RealVector]) -> Result<RealVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Empty("mean of empty vector list".into()))?;
    let mut acc = RealVector::zeros(first.dim());
    for v in vectors {
        if v.dim() != first.dim() {
            return Err(Error::Shape(format!(
                "mean_vector: dims {} vs {}",
                v.dim(),
                first.dim()
            )));
        }
        acc.axpy(1.0, v);
    }
    acc.scale(1.0 / vectors.len() as f64);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn v(values: &[f64]) -> RealVector {
        RealVector::new(values.to_vec())
    }

    fn tiny_model(seed: u64) -> EmbeddingModel {
        let vocab = Vocabulary::build(["dog", "cat", "runs", "tree", "bird"]);
        EmbeddingModel::new(
            ModelDims { d: 3, d_h: 4, v: 2, word_dim: 5 },
            vocab,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn vocabulary_assigns_sorted_ids_with_unknown_at_zero() {
        let vocab = Vocabulary::build(["dog", "cat", "dog"]);
        assert_eq!(vocab.rows(), &["<unk>", "cat", "dog"]);
        assert_eq!(vocab.id("cat"), 1);
        assert_eq!(vocab.id("zebra"), 0, "unknown tokens map to row 0");
    }

    #[test]
    fn encode_image_identity_and_hand_case() {
        let vocab = Vocabulary::build(["a"]);
        let mut m = EmbeddingModel::new(
            ModelDims { d: 2, d_h: 2, v: 2, word_dim: 2 },
            vocab,
            0,
        )
        .unwrap();
        *m.params.value_mut("w_image") = Tensor::Matrix(RealMatrix::identity(2));
        assert_eq!(
            encode_image(&m, &v(&[1.0, 2.0])).unwrap().as_slice(),
            &[1.0, 2.0]
        );

        *m.params.value_mut("w_image") =
            Tensor::Matrix(RealMatrix::new(2, 2, vec![1.0, 1.0, 1.0, -1.0]).unwrap());
        assert_eq!(
            encode_image(&m, &v(&[2.0, 3.0])).unwrap().as_slice(),
            &[5.0, -1.0]
        );

        *m.params.value_mut("w_image") = Tensor::Matrix(RealMatrix::zeros(2, 2));
        assert_eq!(
            encode_image(&m, &v(&[2.0, 3.0])).unwrap().as_slice(),
            &[0.0, 0.0],
            "zero projection yields the zero vector; cosine flags it downstream"
        );
    }

    #[test]
    fn encode_image_rejects_wrong_feature_dim() {
        let model = tiny_model(1);
        let err = encode_image(&model, &v(&[1.0, 2.0, 3.0]));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    fn zero_gru_model() -> EmbeddingModel {
        let mut model = tiny_model(2);
        for name in [
            "gru.w_z", "gru.w_r", "gru.w_h", "gru.u_z", "gru.u_r", "gru.u_h",
        ] {
            let shape = model.params.value(name).zeros_like();
            *model.params.value_mut(name) = shape;
        }
        model
    }

    #[test]
    fn gru_step_all_zero_params_is_fixed_at_zero() {
        let model = zero_gru_model();
        let h = RealVector::zeros(4);
        let x = RealVector::zeros(5);
        let out = gru_step(&model.gru(), &h, &x).unwrap();
        assert_eq!(out.as_slice(), &[0.0; 4], "z=0.5 and h~=0 keep h at 0");
    }

    #[test]
    fn gru_step_saturated_update_gate_follows_candidate() {
        let mut model = zero_gru_model();
        *model.params.value_mut("gru.b_z") =
            Tensor::Vector(RealVector::new(vec![50.0; 4]));
        let h = v(&[0.3, -0.2, 0.9, 0.1]);
        let x = RealVector::zeros(5);
        let out = gru_step(&model.gru(), &h, &x).unwrap();
        // z saturates at 1, candidate is tanh(0) = 0, so h' collapses to ~0.
        for k in 0..4 {
            assert!(out[k].abs() < 1e-9, "h'[{k}] = {}", out[k]);
        }
    }

    #[test]
    fn gru_step_matches_scalar_oracle() {
        // Independent scalar-by-scalar recomputation of one step, D_h = D_in = 2.
        let vocab = Vocabulary::build(["a"]);
        let model = EmbeddingModel::new(
            ModelDims { d: 2, d_h: 2, v: 2, word_dim: 2 },
            vocab,
            42,
        )
        .unwrap();
        let h = v(&[0.25, -0.5]);
        let x = v(&[0.7, 0.1]);
        let got = gru_step(&model.gru(), &h, &x).unwrap();

        let p = model.gru();
        let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
        for k in 0..2 {
            let zk = sig(p.w_z.get(k, 0) * x[0] + p.w_z.get(k, 1) * x[1]
                + p.u_z.get(k, 0) * h[0] + p.u_z.get(k, 1) * h[1] + p.b_z[k]);
            let rk = |i: usize| {
                sig(p.w_r.get(i, 0) * x[0] + p.w_r.get(i, 1) * x[1]
                    + p.u_r.get(i, 0) * h[0] + p.u_r.get(i, 1) * h[1] + p.b_r[i])
            };
            let ht = (p.w_h.get(k, 0) * x[0] + p.w_h.get(k, 1) * x[1]
                + p.u_h.get(k, 0) * (rk(0) * h[0]) + p.u_h.get(k, 1) * (rk(1) * h[1])
                + p.b_h[k])
                .tanh();
            let expect = (1.0 - zk) * h[k] + zk * ht;
            assert!((got[k] - expect).abs() < 1e-12, "entry {k}");
        }
    }

    #[test]
    fn encode_sentence_zero_params_gives_zero() {
        let model = zero_gru_model();
        let s = encode_sentence(&model, &vec![1]).unwrap();
        assert_eq!(s.as_slice(), &[0.0; 3]);
    }

    #[test]
    fn encode_sentence_closed_update_gate_keeps_h_at_start() {
        let mut model = tiny_model(3);
        *model.params.value_mut("gru.b_z") =
            Tensor::Vector(RealVector::new(vec![-50.0; 4]));
        let (_, cache) = encode_sentence_cached(&model, &vec![2, 2, 2, 2]).unwrap();
        for entry in cache.h_final().as_slice() {
            assert!(entry.abs() < 1e-9, "closed gate must keep h at h0 = 0");
        }
    }

    #[test]
    fn encode_sentence_rejects_empty_sequence() {
        let model = tiny_model(4);
        assert!(matches!(
            encode_sentence(&model, &vec![]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn encode_sentence_equals_iterated_gru_step() {
        let model = tiny_model(5);
        let tokens = vec![1, 3, 2];
        let s = encode_sentence(&model, &tokens).unwrap();

        let gru = model.gru();
        let mut h = RealVector::zeros(4);
        for &id in &tokens {
            let x = model.word_vector(id);
            h = gru_step(&gru, &h, &x).unwrap();
        }
        let oracle = matvec(model.params.matrix("w_sentence"), &h).unwrap();
        for k in 0..3 {
            assert!((s[k] - oracle[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn sentence_encoding_is_order_sensitive() {
        let mut differs = 0;
        for seed in 0..5u64 {
            let model = tiny_model(100 + seed);
            let fwd = encode_sentence(&model, &vec![1, 2, 3, 4]).unwrap();
            let rev = encode_sentence(&model, &vec![4, 3, 2, 1]).unwrap();
            let gap: f64 = (0..3).map(|k| (fwd[k] - rev[k]).abs()).sum();
            if gap > 1e-9 {
                differs += 1;
            }
        }
        assert_eq!(differs, 5, "token order must matter for sentence encoding");
    }

    #[test]
    fn gru_activations_stay_in_range() {
        let mut rng = StdRng::seed_from_u64(9);
        let model = tiny_model(9);
        let gru = model.gru();
        let mut h = RealVector::zeros(4);
        for _ in 0..10 {
            let x = RealVector::new((0..5).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let state = gru_step_full(&gru, &h, &x).unwrap();
            for k in 0..4 {
                assert!(state.z[k] > 0.0 && state.z[k] < 1.0);
                assert!(state.r[k] > 0.0 && state.r[k] < 1.0);
                assert!(state.h_next[k] > -1.0 && state.h_next[k] < 1.0);
            }
            h = state.h_next;
        }
    }

    #[test]
    fn encode_tags_examples_and_permutation_invariance() {
        let vocab = Vocabulary::build(["a"]);
        let mut model = EmbeddingModel::new(
            ModelDims { d: 2, d_h: 2, v: 2, word_dim: 2 },
            vocab,
            7,
        )
        .unwrap();
        *model.params.value_mut("w_tag") = Tensor::Matrix(RealMatrix::identity(2));

        let single = encode_tags(&model, &[v(&[0.4, 0.6])]).unwrap();
        assert_eq!(single.as_slice(), &[0.4, 0.6]);

        let pair = encode_tags(&model, &[v(&[1.0, 0.0]), v(&[0.0, 1.0])]).unwrap();
        assert_eq!(pair.as_slice(), &[0.5, 0.5]);

        let a = v(&[0.1, 0.9]);
        let b = v(&[-0.3, 0.2]);
        let c = v(&[0.8, -0.5]);
        let fwd = encode_tags(&model, &[a.clone(), b.clone(), c.clone()]).unwrap();
        let perm = encode_tags(&model, &[c, a, b]).unwrap();
        assert_eq!(fwd, perm, "tag bags are order-free");
    }

    #[test]
    fn encode_tags_rejects_empty_list() {
        let model = tiny_model(11);
        assert!(matches!(encode_tags(&model, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn projections_are_linear_in_the_input() {
        let model = tiny_model(13);
        let a = v(&[0.2, -0.7]);
        let b = v(&[1.1, 0.4]);
        let mut combo = a.scaled(2.0);
        combo.axpy(-3.0, &b);
        let lhs = encode_image(&model, &combo).unwrap();
        let mut rhs = encode_image(&model, &a).unwrap().scaled(2.0);
        rhs.axpy(-3.0, &encode_image(&model, &b).unwrap());
        for k in 0..3 {
            assert!((lhs[k] - rhs[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn word_init_rows_override_random_init() {
        let vocab = Vocabulary::build(["dog", "cat"]);
        let mut init = BTreeMap::new();
        init.insert("dog".to_string(), v(&[1.0, 2.0, 3.0]));
        let model = EmbeddingModel::with_word_init(
            ModelDims { d: 2, d_h: 2, v: 2, word_dim: 3 },
            vocab,
            21,
            &init,
        )
        .unwrap();
        let dog = model.word_vector(model.vocab.id("dog"));
        assert_eq!(dog.as_slice(), &[1.0, 2.0, 3.0]);
        let cat = model.word_vector(model.vocab.id("cat"));
        assert!(cat.as_slice().iter().all(|x| x.abs() < 1.0 / 3f64.sqrt()));
    }

    #[test]
    fn model_seeds_are_reproducible_and_distinct() {
        let a = tiny_model(77);
        let b = tiny_model(77);
        let c = tiny_model(78);
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }
}
