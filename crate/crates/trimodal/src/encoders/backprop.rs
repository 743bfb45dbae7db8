//! Hand-derived backward passes for the three encoder pathways.
//!
//! Gradients arrive from the losses as dL/d(joint embedding) and are pushed
//! back onto the named parameters of the model. The image and tag pathways
//! are single projections (rank-1 updates); the sentence pathway
//! backpropagates through W_sentence, the GRU unrolled over the sequence,
//! and into the word-table rows of the tokens that appeared.

use std::collections::BTreeMap;

use super::EmbeddingModel;
use crate::numerics::{RealMatrix, RealVector, Tensor};

/// Per-step activations captured during `encode_sentence_cached`, in input
/// order. Everything the backward pass needs and nothing else.
#[derive(Debug, Clone)]
pub struct SentenceCache {
    token_ids: Vec<usize>,
    h_prevs: Vec<RealVector>,
    xs: Vec<RealVector>,
    zs: Vec<RealVector>,
    rs: Vec<RealVector>,
    h_tildes: Vec<RealVector>,
    h_final: RealVector,
}

impl SentenceCache {
    pub(crate) fn with_capacity(n: usize) -> Self {
        SentenceCache {
            token_ids: Vec::with_capacity(n),
            h_prevs: Vec::with_capacity(n),
            xs: Vec::with_capacity(n),
            zs: Vec::with_capacity(n),
            rs: Vec::with_capacity(n),
            h_tildes: Vec::with_capacity(n),
            h_final: RealVector::zeros(0),
        }
    }

    pub(crate) fn push(
        &mut self,
        token_id: usize,
        h_prev: RealVector,
        x: RealVector,
        state: &super::GruStepState,
    ) {
        self.token_ids.push(token_id);
        self.h_prevs.push(h_prev);
        self.xs.push(x);
        self.zs.push(state.z.clone());
        self.rs.push(state.r.clone());
        self.h_tildes.push(state.h_tilde.clone());
    }

    pub(crate) fn finish(&mut self, h_final: RealVector) {
        self.h_final = h_final;
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn h_final(&self) -> &RealVector {
        &self.h_final
    }
}

fn mat<'a>(values: &'a BTreeMap<String, Tensor>, name: &str) -> &'a RealMatrix {
    match values.get(name) {
        Some(Tensor::Matrix(m)) => m,
        _ => panic!("parameter '{name}' missing or not a matrix"),
    }
}

fn grad_mat<'a>(grads: &'a mut BTreeMap<String, Tensor>, name: &str) -> &'a mut RealMatrix {
    match grads.get_mut(name) {
        Some(Tensor::Matrix(m)) => m,
        _ => panic!("gradient '{name}' missing or not a matrix"),
    }
}

fn grad_vec<'a>(grads: &'a mut BTreeMap<String, Tensor>, name: &str) -> &'a mut RealVector {
    match grads.get_mut(name) {
        Some(Tensor::Vector(v)) => v,
        _ => panic!("gradient '{name}' missing or not a vector"),
    }
}

fn mat_t_vec(m: &RealMatrix, v: &RealVector) -> RealVector {
    crate::numerics::matvec_t(m, v).expect("shapes fixed at model construction")
}

/// dL/dW_image += g ⊗ feat for one pair. The feature itself is frozen input.
pub fn backprop_image(model: &mut EmbeddingModel, grad_joint: &RealVector, feat: &RealVector) {
    model
        .params
        .grad_matrix_mut("w_image")
        .add_outer(1.0, grad_joint, feat);
}

/// dL/dW_tag += g ⊗ t̄ for one pair. Tag word vectors are frozen input.
pub fn backprop_tag_bag(model: &mut EmbeddingModel, grad_joint: &RealVector, t_bar: &RealVector) {
    model
        .params
        .grad_matrix_mut("w_tag")
        .add_outer(1.0, grad_joint, t_bar);
}

/// Backpropagates dL/ds through W_sentence and the unrolled GRU, accumulating
/// into the gradients of W_sentence, all nine GRU parameters, and the
/// word-table rows of the tokens in the cached sequence.
///
/// Derivation, per step t (reverse order), with a_g the pre-activation of
/// gate g and ⊙ elementwise product:
///
/// ```text
/// h' = (1−z)⊙h + z⊙h~        dz = dh'⊙(h~ − h), dh~ = dh'⊙z, dh += dh'⊙(1−z)
/// h~ = tanh(a_h)              da_h = dh~⊙(1 − h~²)
/// a_h = W_h x + U_h(r⊙h) + b  d(r⊙h) = U_hᵀ da_h, dr = d(r⊙h)⊙h, dh += d(r⊙h)⊙r
/// r  = σ(a_r)                 da_r = dr⊙r⊙(1−r), dh += U_rᵀ da_r
/// z  = σ(a_z)                 da_z = dz⊙z⊙(1−z), dh += U_zᵀ da_z
/// dx = W_hᵀ da_h + W_rᵀ da_r + W_zᵀ da_z   (accumulated into the token's row)
/// ```
pub fn backprop_sentence(
    model: &mut EmbeddingModel,
    cache: &SentenceCache,
    grad_joint: &RealVector,
) {
    assert!(!cache.is_empty(), "cannot backprop an empty sentence cache");
    let d_h = cache.h_final.dim();
    let (values, grads) = model.params.split_mut();

    // s = W_sentence · h_T
    let mut dh = mat_t_vec(mat(values, "w_sentence"), grad_joint);
    grad_mat(grads, "w_sentence").add_outer(1.0, grad_joint, &cache.h_final);

    for t in (0..cache.token_ids.len()).rev() {
        let z = &cache.zs[t];
        let r = &cache.rs[t];
        let h_tilde = &cache.h_tildes[t];
        let h_prev = &cache.h_prevs[t];
        let x = &cache.xs[t];

        let mut dz = RealVector::zeros(d_h);
        let mut dh_tilde = RealVector::zeros(d_h);
        let mut dh_prev = RealVector::zeros(d_h);
        for k in 0..d_h {
            dz[k] = dh[k] * (h_tilde[k] - h_prev[k]);
            dh_tilde[k] = dh[k] * z[k];
            dh_prev[k] = dh[k] * (1.0 - z[k]);
        }

        let mut da_h = RealVector::zeros(d_h);
        let mut reset_h = RealVector::zeros(d_h);
        for k in 0..d_h {
            da_h[k] = dh_tilde[k] * (1.0 - h_tilde[k] * h_tilde[k]);
            reset_h[k] = r[k] * h_prev[k];
        }
        grad_mat(grads, "gru.w_h").add_outer(1.0, &da_h, x);
        grad_mat(grads, "gru.u_h").add_outer(1.0, &da_h, &reset_h);
        grad_vec(grads, "gru.b_h").axpy(1.0, &da_h);

        let d_reset_h = mat_t_vec(mat(values, "gru.u_h"), &da_h);
        let mut da_r = RealVector::zeros(d_h);
        for k in 0..d_h {
            let dr = d_reset_h[k] * h_prev[k];
            dh_prev[k] += d_reset_h[k] * r[k];
            da_r[k] = dr * r[k] * (1.0 - r[k]);
        }
        grad_mat(grads, "gru.w_r").add_outer(1.0, &da_r, x);
        grad_mat(grads, "gru.u_r").add_outer(1.0, &da_r, h_prev);
        grad_vec(grads, "gru.b_r").axpy(1.0, &da_r);
        dh_prev.axpy(1.0, &mat_t_vec(mat(values, "gru.u_r"), &da_r));

        let mut da_z = RealVector::zeros(d_h);
        for k in 0..d_h {
            da_z[k] = dz[k] * z[k] * (1.0 - z[k]);
        }
        grad_mat(grads, "gru.w_z").add_outer(1.0, &da_z, x);
        grad_mat(grads, "gru.u_z").add_outer(1.0, &da_z, h_prev);
        grad_vec(grads, "gru.b_z").axpy(1.0, &da_z);
        dh_prev.axpy(1.0, &mat_t_vec(mat(values, "gru.u_z"), &da_z));

        let mut dx = mat_t_vec(mat(values, "gru.w_h"), &da_h);
        dx.axpy(1.0, &mat_t_vec(mat(values, "gru.w_r"), &da_r));
        dx.axpy(1.0, &mat_t_vec(mat(values, "gru.w_z"), &da_z));
        let row = grad_mat(grads, "word_table").row_mut(cache.token_ids[t]);
        for (slot, g) in row.iter_mut().zip(dx.as_slice()) {
            *slot += g;
        }

        dh = dh_prev;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{
        encode_image, encode_sentence_cached, ModelDims, Vocabulary,
    };
    use crate::losses::{vsepp_loss, BatchEmbeddings, LossConfig};
    use crate::numerics::{check_gradient, dot};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn model_for_check(seed: u64) -> EmbeddingModel {
        let vocab = Vocabulary::build(["ant", "bee", "cow", "elk", "fox"]);
        EmbeddingModel::new(
            ModelDims { d: 4, d_h: 3, v: 4, word_dim: 3 },
            vocab,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn projection_gradient_is_exact_rank_one_update() {
        let mut model = model_for_check(1);
        let feat = RealVector::new(vec![0.5, -1.0, 2.0, 0.25]);
        let g = RealVector::new(vec![1.0, 2.0, -1.0, 0.5]);
        model.params.zero_grads();
        backprop_image(&mut model, &g, &feat);
        let grad = model.params.grad_matrix("w_image");
        for r in 0..4 {
            for c in 0..4 {
                assert!((grad.get(r, c) - g[r] * feat[c]).abs() < 1e-15);
            }
        }
    }

    // Full pipeline check: loss(θ) = vsepp over sentences encoded from θ
    // against fixed image embeddings. Every sentence-side parameter entry
    // (word table, all GRU weights, W_sentence) is perturbed.
    #[test]
    fn sentence_pipeline_passes_finite_difference_check() {
        let mut rng = StdRng::seed_from_u64(33);
        let mut model = model_for_check(33);
        let sequences: Vec<Vec<usize>> = vec![vec![1, 2], vec![3, 4, 1], vec![5, 2, 3]];
        let images: Vec<RealVector> = (0..3)
            .map(|_| RealVector::new((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let joint_images: Vec<RealVector> = images
            .iter()
            .map(|f| encode_image(&model, f).unwrap())
            .collect();
        let cfg = LossConfig::default();

        // Analytic pass.
        model.params.zero_grads();
        let mut caches = Vec::new();
        let mut sentences = Vec::new();
        for seq in &sequences {
            let (s, cache) = encode_sentence_cached(&model, seq).unwrap();
            sentences.push(s);
            caches.push(cache);
        }
        let out = vsepp_loss(
            &BatchEmbeddings::new(joint_images.clone(), sentences).unwrap(),
            &cfg,
        );
        for (cache, g) in caches.iter().zip(&out.text_grads) {
            backprop_sentence(&mut model, cache, g);
        }

        // Numeric pass over a parameter set that shares the model's storage.
        let dims = model.dims;
        let vocab = model.vocab.clone();
        let report = check_gradient(
            |ps| {
                let probe_model = EmbeddingModel {
                    dims,
                    vocab: vocab.clone(),
                    normalize_joint: false,
                    seed: 0,
                    params: ps.clone(),
                };
                let sentences: Vec<RealVector> = sequences
                    .iter()
                    .map(|seq| crate::encoders::encode_sentence(&probe_model, seq))
                    .collect::<crate::error::Result<_>>()?;
                let batch = BatchEmbeddings::new(joint_images.clone(), sentences)?;
                Ok(vsepp_loss(&batch, &cfg).probe())
            },
            &mut model.params,
            1e-5,
            1e-4,
        )
        .unwrap();

        // w_image / w_tag entries hold no analytic gradient and the loss does
        // not depend on w_tag; w_image feeds the fixed joint_images, so its
        // entries were excluded by cloning them into constants above.
        let sentence_max = crate::encoders::SENTENCE_PARAMS
            .iter()
            .map(|name| report.per_parameter[*name])
            .fold(0.0f64, f64::max);
        assert!(
            sentence_max < 1e-4,
            "sentence pipeline max rel error {sentence_max}"
        );
        assert!(report.entries_checked > 0);
    }

    #[test]
    fn unused_tokens_receive_no_word_table_gradient() {
        let mut model = model_for_check(7);
        let (_, cache) = encode_sentence_cached(&model, &vec![1, 2]).unwrap();
        model.params.zero_grads();
        backprop_sentence(&mut model, &cache, &RealVector::new(vec![1.0, 0.0, -1.0, 2.0]));
        let table = model.params.grad_matrix("word_table");
        for row in [0usize, 3, 4, 5] {
            assert!(
                table.row(row).iter().all(|&x| x == 0.0),
                "row {row} must stay zero"
            );
        }
        assert!(table.row(1).iter().any(|&x| x != 0.0));
        assert!(dot(
            &RealVector::new(table.row(2).to_vec()),
            &RealVector::new(table.row(2).to_vec())
        ) > 0.0);
    }
}
