//! Bi-directional pairwise ranking losses over the joint embedding space.
//!
//! Four losses are implemented, all built on cosine similarity f:
//!
//! * `vse_loss` — sums hinge violations over every in-batch negative:
//!   L = Σ_k { Σ_{j≠k} max[0, Δ − f(i_k,s_k) + f(i_k,s_j)]
//!           + Σ_{j≠k} max[0, Δ − f(s_k,i_k) + f(s_k,i_j)] }
//! * `vsepp_loss` — keeps only the hardest negative per direction:
//!   ŝ_k = argmax_{j≠k} f(i_k,s_j), î_k = argmax_{j≠k} f(s_k,i_j)
//! * `image_tag_loss` — the hardest-negative form applied to (image, tag-bag)
//!   pairs, one aggregated tag vector per image
//! * `combined_loss` — λ_is · L_IS + λ_it · L_IT
//!
//! Every loss returns analytic gradients w.r.t. each input embedding. There
//! is no autodiff; the gradients are derived by hand and kept honest by
//! `numerics::check_gradient`.
//!
//! Conventions fixed here for reproducibility: negatives are in-batch (all
//! j ≠ k), losses are summed over the batch rather than averaged (a mean
//! reduction flag exists but is off by default), argmax ties break toward the
//! lowest index, and a hinge argument of exactly zero is inactive.

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, LossProbe, RealVector};

/// Aligned batch of embedding pairs: position k is a matching pair, every
/// other index within the batch serves as a negative.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    images: Vec<RealVector>,
    texts: Vec<RealVector>,
    image_units: Vec<RealVector>,
    text_units: Vec<RealVector>,
    image_norms: Vec<f64>,
    text_norms: Vec<f64>,
}

impl BatchEmbeddings {
    /// Validates lengths, dimensions, and nonzero norms, and caches the unit
    /// vectors that every similarity and gradient formula reuses.
    pub fn new(images: Vec<RealVector>, texts_or_tags: Vec<RealVector>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("batch has no pairs".into()));
        }
        if images.len() != texts_or_tags.len() {
            return Err(Error::Shape(format!(
                "batch misaligned: {} images vs {} texts",
                images.len(),
                texts_or_tags.len()
            )));
        }
        let dim = images[0].dim();
        let unit = |side: &str, vectors: &[RealVector]| -> Result<(Vec<RealVector>, Vec<f64>)> {
            let mut units = Vec::with_capacity(vectors.len());
            let mut norms = Vec::with_capacity(vectors.len());
            for (k, v) in vectors.iter().enumerate() {
                if v.dim() != dim {
                    return Err(Error::Shape(format!(
                        "{side} embedding {k} has dim {}, expected {dim}",
                        v.dim()
                    )));
                }
                let n = l2_norm(v);
                if n == 0.0 {
                    return Err(Error::Degenerate(format!(
                        "{side} embedding {k} has zero norm"
                    )));
                }
                units.push(v.scaled(1.0 / n));
                norms.push(n);
            }
            Ok((units, norms))
        };
        let (image_units, image_norms) = unit("image", &images)?;
        let (text_units, text_norms) = unit("text", &texts_or_tags)?;
        Ok(BatchEmbeddings {
            images,
            texts: texts_or_tags,
            image_units,
            text_units,
            image_norms,
            text_norms,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images[0].dim()
    }

    pub fn images(&self) -> &[RealVector] {
        &self.images
    }

    pub fn texts(&self) -> &[RealVector] {
        &self.texts
    }

    /// Full cosine table: entry (k, j) is f(i_k, s_j).
    fn similarity(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        let mut f = vec![vec![0.0; n]; n];
        for k in 0..n {
            for j in 0..n {
                f[k][j] = crate::numerics::dot(&self.image_units[k], &self.text_units[j]);
            }
        }
        f
    }
}

/// Loss weighting and margin.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Hinge margin Δ.
    pub margin: f64,
    /// λ1, weight of the image-sentence loss in the combined objective.
    pub lambda_is: f64,
    /// λ2, weight of the image-tag loss.
    pub lambda_it: f64,
    /// Divide value and gradients by batch size. Off by default: the losses
    /// are defined as sums and the default learning rate assumes that.
    pub mean_reduce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            lambda_is: 1.0,
            lambda_it: 1.0,
            mean_reduce: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if self.lambda_is < 0.0 || self.lambda_it < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Loss value plus analytic gradients, shaped like the input batch.
///
/// A pair whose hinge terms are all inactive contributes zero gradient.
/// `kink_distance` is the smallest |hinge argument| (and, for hard-negative
/// losses, smallest argmax winner gap) encountered; the gradient checker
/// skips entries whose perturbations land within `KINK_THRESHOLD` of zero.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub image_grads: Vec<RealVector>,
    pub text_grads: Vec<RealVector>,
    pub kink_distance: f64,
}

impl LossOutput {
    fn zeros(n: usize, dim: usize) -> Self {
        LossOutput {
            value: 0.0,
            image_grads: vec![RealVector::zeros(dim); n],
            text_grads: vec![RealVector::zeros(dim); n],
            kink_distance: f64::INFINITY,
        }
    }

    pub fn probe(&self) -> LossProbe {
        LossProbe {
            value: self.value,
            kink_distance: self.kink_distance,
        }
    }

    /// Scales the value and every gradient by `alpha`, e.g. by a loss weight.
    pub fn scale(&mut self, alpha: f64) {
        self.value *= alpha;
        for g in self.image_grads.iter_mut().chain(self.text_grads.iter_mut()) {
            g.scale(alpha);
        }
    }
}

/// Selector for the three primitive losses; handy for code that checks or
/// demonstrates all of them uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Vse,
    Vsepp,
    ImageTag,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Vse => "vse",
            LossKind::Vsepp => "vsepp",
            LossKind::ImageTag => "image_tag",
        }
    }
}

pub fn loss_by_kind(kind: LossKind, batch: &BatchEmbeddings, cfg: &LossConfig) -> LossOutput {
    match kind {
        LossKind::Vse => vse_loss(batch, cfg),
        LossKind::Vsepp => vsepp_loss(batch, cfg),
        LossKind::ImageTag => image_tag_loss(batch, cfg),
    }
}

// Gradient of f(a, b) = cos(a, b) w.r.t. a is (b̂ − f·â)/‖a‖. The helpers
// below accumulate alpha times that into an output slot.
fn add_cos_grad(
    out: &mut RealVector,
    alpha: f64,
    own_unit: &RealVector,
    other_unit: &RealVector,
    f: f64,
    own_norm: f64,
) {
    let inv = alpha / own_norm;
    for d in 0..out.dim() {
        out[d] += inv * (other_unit[d] - f * own_unit[d]);
    }
}

/// Sum-over-all-negatives ranking loss (both retrieval directions).
pub fn vse_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> LossOutput {
    let n = batch.len();
    let mut out = LossOutput::zeros(n, batch.dim());
    if n < 2 {
        return out; // no negatives, loss defined as 0
    }
    let f = batch.similarity();
    for k in 0..n {
        for j in 0..n {
            if j == k {
                continue;
            }
            accumulate_text_negative(&mut out, batch, &f, cfg.margin, k, j);
            accumulate_image_negative(&mut out, batch, &f, cfg.margin, k, j);
        }
    }
    if cfg.mean_reduce {
        out.scale(1.0 / n as f64);
    }
    out
}

/// Hardest-negative ranking loss. At batch size 2 the single candidate is
/// trivially the hardest, so this matches `vse_loss` bit for bit.
pub fn vsepp_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> LossOutput {
    let n = batch.len();
    let mut out = LossOutput::zeros(n, batch.dim());
    if n < 2 {
        return out;
    }
    let f = batch.similarity();
    for k in 0..n {
        // Hardest text negative for anchor image k: argmax_{j≠k} f(i_k, s_j).
        let (jt, gap_t) = hardest(n, k, |j| f[k][j]);
        // Hardest image negative for anchor text k: argmax_{j≠k} f(i_j, s_k).
        let (ji, gap_i) = hardest(n, k, |j| f[j][k]);
        out.kink_distance = out.kink_distance.min(gap_t).min(gap_i);
        accumulate_text_negative(&mut out, batch, &f, cfg.margin, k, jt);
        accumulate_image_negative(&mut out, batch, &f, cfg.margin, k, ji);
    }
    if cfg.mean_reduce {
        out.scale(1.0 / n as f64);
    }
    out
}

/// Image-tag ranking loss: the hardest-negative form over (image, tag-bag)
/// pairs. `batch.texts()` must hold one aggregated tag vector per image.
pub fn image_tag_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> LossOutput {
    vsepp_loss(batch, cfg)
}

/// Argmax over j ≠ k of `score`, ties toward the lowest index; also returns
/// the winner-minus-runner-up gap (the distance to an argmax flip).
fn hardest(n: usize, k: usize, score: impl Fn(usize) -> f64) -> (usize, f64) {
    let mut best = usize::MAX;
    let mut best_score = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for j in 0..n {
        if j == k {
            continue;
        }
        let s = score(j);
        if s > best_score {
            second = best_score;
            best_score = s;
            best = j;
        } else if s > second {
            second = s;
        }
    }
    let gap = if second == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        best_score - second
    };
    (best, gap)
}

// Hinge term with text negative j against anchor image k:
// max[0, Δ − f(i_k,s_k) + f(i_k,s_j)].
fn accumulate_text_negative(
    out: &mut LossOutput,
    batch: &BatchEmbeddings,
    f: &[Vec<f64>],
    margin: f64,
    k: usize,
    j: usize,
) {
    let arg = margin - f[k][k] + f[k][j];
    out.kink_distance = out.kink_distance.min(arg.abs());
    if arg > 0.0 {
        out.value += arg;
        // d/d i_k: −∇f(i_k,s_k) + ∇f(i_k,s_j)
        add_cos_grad(
            &mut out.image_grads[k],
            -1.0,
            &batch.image_units[k],
            &batch.text_units[k],
            f[k][k],
            batch.image_norms[k],
        );
        add_cos_grad(
            &mut out.image_grads[k],
            1.0,
            &batch.image_units[k],
            &batch.text_units[j],
            f[k][j],
            batch.image_norms[k],
        );
        // d/d s_k: −∇f(i_k,s_k)
        add_cos_grad(
            &mut out.text_grads[k],
            -1.0,
            &batch.text_units[k],
            &batch.image_units[k],
            f[k][k],
            batch.text_norms[k],
        );
        // d/d s_j: +∇f(i_k,s_j)
        add_cos_grad(
            &mut out.text_grads[j],
            1.0,
            &batch.text_units[j],
            &batch.image_units[k],
            f[k][j],
            batch.text_norms[j],
        );
    }
}

// Hinge term with image negative j against anchor text k:
// max[0, Δ − f(s_k,i_k) + f(s_k,i_j)].
fn accumulate_image_negative(
    out: &mut LossOutput,
    batch: &BatchEmbeddings,
    f: &[Vec<f64>],
    margin: f64,
    k: usize,
    j: usize,
) {
    let arg = margin - f[k][k] + f[j][k];
    out.kink_distance = out.kink_distance.min(arg.abs());
    if arg > 0.0 {
        out.value += arg;
        add_cos_grad(
            &mut out.text_grads[k],
            -1.0,
            &batch.text_units[k],
            &batch.image_units[k],
            f[k][k],
            batch.text_norms[k],
        );
        add_cos_grad(
            &mut out.text_grads[k],
            1.0,
            &batch.text_units[k],
            &batch.image_units[j],
            f[j][k],
            batch.text_norms[k],
        );
        add_cos_grad(
            &mut out.image_grads[k],
            -1.0,
            &batch.image_units[k],
            &batch.text_units[k],
            f[k][k],
            batch.image_norms[k],
        );
        add_cos_grad(
            &mut out.image_grads[j],
            1.0,
            &batch.image_units[j],
            &batch.text_units[k],
            f[j][k],
            batch.image_norms[j],
        );
    }
}

/// Weighted combination λ_is · L_IS + λ_it · L_IT.
///
/// The two component losses own different text-side blocks (sentences vs tag
/// bags), so their gradients stay separate: `image_grads` carries the summed
/// image block, `sentence_grads` the weighted L_IS text block, `tag_grads`
/// the weighted L_IT text block.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub value: f64,
    pub image_grads: Vec<RealVector>,
    pub sentence_grads: Vec<RealVector>,
    pub tag_grads: Vec<RealVector>,
    pub kink_distance: f64,
}

pub fn combined_loss(
    is_out: &LossOutput,
    it_out: &LossOutput,
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    if is_out.image_grads.len() != it_out.image_grads.len() {
        return Err(Error::Shape(format!(
            "combined_loss: {} image-sentence pairs vs {} image-tag pairs",
            is_out.image_grads.len(),
            it_out.image_grads.len()
        )));
    }
    let value = cfg.lambda_is * is_out.value + cfg.lambda_it * it_out.value;
    let image_grads = is_out
        .image_grads
        .iter()
        .zip(&it_out.image_grads)
        .map(|(a, b)| {
            let mut g = a.scaled(cfg.lambda_is);
            g.axpy(cfg.lambda_it, b);
            g
        })
        .collect();
    Ok(CombinedLoss {
        value,
        image_grads,
        sentence_grads: is_out.text_grads.iter().map(|g| g.scaled(cfg.lambda_is)).collect(),
        tag_grads: it_out.text_grads.iter().map(|g| g.scaled(cfg.lambda_it)).collect(),
        kink_distance: is_out.kink_distance.min(it_out.kink_distance),
    })
}

/// Packs a batch into a `ParameterSet` (entries `img_k` / `txt_k`), fills the
/// gradient buffer from one backward pass, and runs the finite-difference
/// checker over every embedding entry. Shared by the self-check command, the
/// acceptance suite, and the gradient-check example.
pub fn embedding_gradcheck(
    kind: LossKind,
    images: &[RealVector],
    texts: &[RealVector],
    cfg: &LossConfig,
    epsilon: f64,
    tolerance: f64,
) -> Result<crate::numerics::GradCheckReport> {
    use crate::numerics::{check_gradient, ParameterSet, Tensor};

    let n = images.len();
    let batch = BatchEmbeddings::new(images.to_vec(), texts.to_vec())?;
    let out = loss_by_kind(kind, &batch, cfg);

    let mut params = ParameterSet::new();
    for (k, v) in images.iter().enumerate() {
        params.register(&format!("img_{k:03}"), Tensor::Vector(v.clone()))?;
    }
    for (k, v) in texts.iter().enumerate() {
        params.register(&format!("txt_{k:03}"), Tensor::Vector(v.clone()))?;
    }
    for k in 0..n {
        *params.grad_vector_mut(&format!("img_{k:03}")) = out.image_grads[k].clone();
        *params.grad_vector_mut(&format!("txt_{k:03}")) = out.text_grads[k].clone();
    }

    let cfg = *cfg;
    check_gradient(
        move |ps| {
            let images: Vec<RealVector> =
                (0..n).map(|k| ps.vector(&format!("img_{k:03}")).clone()).collect();
            let texts: Vec<RealVector> =
                (0..n).map(|k| ps.vector(&format!("txt_{k:03}")).clone()).collect();
            let batch = BatchEmbeddings::new(images, texts)?;
            Ok(loss_by_kind(kind, &batch, &cfg).probe())
        },
        &mut params,
        epsilon,
        tolerance,
    )
}
