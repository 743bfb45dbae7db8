//! Dense vector/matrix arithmetic, cosine similarity, and the
//! finite-difference gradient checker used by every other module.
//!
//! Everything here is 64-bit. Values are treated as immutable once
//! constructed; all functions are pure and reentrant.

mod gradcheck;
mod params;

pub use gradcheck::{check_gradient, GradCheckReport, LossProbe};
pub use params::{ParameterSet, Tensor};

use crate::error::{Error, Result};

/// Owned 1-D array of 64-bit reals.
///
/// Invariant: all entries are finite. Constructors in the ingestion layer
/// validate this explicitly; internal arithmetic relies on bounded inputs
/// and is checked again at the optimizer and checkpoint boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct RealVector {
    values: Vec<f64>,
}

impl RealVector {
    pub fn new(values: Vec<f64>) -> Self {
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "RealVector entries must be finite"
        );
        RealVector { values }
    }

    pub fn zeros(dim: usize) -> Self {
        RealVector {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// self += alpha * other. Dimensions must agree.
    pub fn axpy(&mut self, alpha: f64, other: &RealVector) {
        assert_eq!(self.dim(), other.dim(), "axpy dimension mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> RealVector {
        RealVector {
            values: self.values.iter().map(|v| v * alpha).collect(),
        }
    }
}

impl std::ops::Index<usize> for RealVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl std::ops::IndexMut<usize> for RealVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}

/// Row-major 2-D array of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "RealMatrix entries must be finite"
        );
        Ok(RealMatrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        RealMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = RealMatrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Rank-1 update: self += alpha * g vᵀ.
    ///
    /// This is the shape every projection gradient takes, dL/dW = g ⊗ input.
    pub fn add_outer(&mut self, alpha: f64, g: &RealVector, v: &RealVector) {
        assert_eq!(self.rows, g.dim(), "add_outer row mismatch");
        assert_eq!(self.cols, v.dim(), "add_outer col mismatch");
        for r in 0..self.rows {
            let gr = alpha * g[r];
            let row = &mut self.values[r * self.cols..(r + 1) * self.cols];
            for (c, out) in row.iter_mut().enumerate() {
                *out += gr * v[c];
            }
        }
    }
}

/// Matrix-vector product m·v.
pub fn matvec(m: &RealMatrix, v: &RealVector) -> Result<RealVector> {
    if m.cols() != v.dim() {
        return Err(Error::Shape(format!(
            "matvec: {}x{} matrix against vector of dim {}",
            m.rows(),
            m.cols(),
            v.dim()
        )));
    }
    let mut out = vec![0.0; m.rows()];
    for (r, slot) in out.iter_mut().enumerate() {
        let row = m.row(r);
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(v.as_slice()) {
            acc += a * b;
        }
        *slot = acc;
    }
    Ok(RealVector::new(out))
}

/// Transposed product mᵀ·v, used when pushing gradients back through a projection.
pub fn matvec_t(m: &RealMatrix, v: &RealVector) -> Result<RealVector> {
    if m.rows() != v.dim() {
        return Err(Error::Shape(format!(
            "matvec_t: {}x{} matrix against vector of dim {}",
            m.rows(),
            m.cols(),
            v.dim()
        )));
    }
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        let vr = v[r];
        let row = m.row(r);
        for (c, slot) in out.iter_mut().enumerate() {
            *slot += row[c] * vr;
        }
    }
    Ok(RealVector::new(out))
}

pub fn dot(a: &RealVector, b: &RealVector) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .sum()
}

/// Euclidean norm √(Σ v[k]²).
pub fn l2_norm(v: &RealVector) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity (a·b)/(‖a‖‖b‖), the scoring function of the joint space.
///
/// A zero-norm argument is an error rather than similarity 0; silent zeros
/// would mask upstream bugs such as an untrained all-zero projection.
pub fn cosine_similarity(a: &RealVector, b: &RealVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "cosine_similarity: dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine_similarity on zero-norm vector".into(),
        ));
    }
    Ok(dot(a, b) / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matvec_identity_passes_vector_through() {
        let m = RealMatrix::identity(2);
        let v = RealVector::new(vec![3.0, 4.0]);
        assert_eq!(matvec(&m, &v).unwrap().as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn matvec_zero_matrix_gives_zero() {
        let m = RealMatrix::zeros(2, 3);
        let v = RealVector::new(vec![1.0, -2.0, 5.0]);
        assert_eq!(matvec(&m, &v).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn matvec_hand_arithmetic() {
        let m = RealMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = RealVector::new(vec![1.0, 1.0]);
        assert_eq!(matvec(&m, &v).unwrap().as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_rejects_dimension_mismatch() {
        let m = RealMatrix::zeros(2, 3);
        let v = RealVector::new(vec![1.0, 2.0]);
        assert!(matches!(matvec(&m, &v), Err(Error::Shape(_))));
    }

    #[test]
    fn matvec_t_agrees_with_explicit_transpose() {
        let m = RealMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let v = RealVector::new(vec![1.0, -1.0]);
        // Columns of m dotted with v: [1-4, 2-5, 3-6].
        assert_eq!(matvec_t(&m, &v).unwrap().as_slice(), &[-3.0, -3.0, -3.0]);
    }

    #[test]
    fn l2_norm_cases() {
        assert_eq!(l2_norm(&RealVector::new(vec![0.0, 0.0, 0.0])), 0.0);
        assert_eq!(l2_norm(&RealVector::new(vec![3.0, 4.0])), 5.0);
        assert_eq!(l2_norm(&RealVector::new(vec![1.0, 1.0, 1.0, 1.0])), 2.0);
    }

    #[test]
    fn cosine_orthogonal_and_collinear() {
        let e1 = RealVector::new(vec![1.0, 0.0]);
        let e2 = RealVector::new(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let a = RealVector::new(vec![1.0, 2.0]);
        let b = RealVector::new(vec![2.0, 4.0]);
        assert!((cosine_similarity(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_an_error() {
        let z = RealVector::zeros(3);
        let a = RealVector::new(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            cosine_similarity(&z, &a),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            cosine_similarity(&a, &z),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn cosine_dimension_mismatch_is_shape_error() {
        let a = RealVector::new(vec![1.0, 2.0]);
        let b = RealVector::new(vec![1.0, 2.0, 3.0]);
        assert!(matches!(cosine_similarity(&a, &b), Err(Error::Shape(_))));
    }

    fn small_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, dim)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn cosine_is_symmetric(a in small_vec(4), b in small_vec(4)) {
            let a = RealVector::new(a);
            let b = RealVector::new(b);
            if let (Ok(ab), Ok(ba)) = (cosine_similarity(&a, &b), cosine_similarity(&b, &a)) {
                prop_assert!((ab - ba).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_is_scale_invariant(
            a in small_vec(4),
            b in small_vec(4),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            let a = RealVector::new(a);
            let b = RealVector::new(b);
            if let Ok(base) = cosine_similarity(&a, &b) {
                let sab = cosine_similarity(&a.scaled(alpha), &b.scaled(beta)).unwrap();
                prop_assert!((base - sab).abs() < 1e-9, "base {base} scaled {sab}");
                prop_assert!(base >= -1.0 - 1e-12 && base <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn matvec_is_linear(
            m in proptest::collection::vec(-5.0f64..5.0, 6),
            u in small_vec(3),
            v in small_vec(3),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let m = RealMatrix::new(2, 3, m).unwrap();
            let u = RealVector::new(u);
            let v = RealVector::new(v);
            let mut combo = u.scaled(alpha);
            combo.axpy(beta, &v);
            let lhs = matvec(&m, &combo).unwrap();
            let mut rhs = matvec(&m, &u).unwrap().scaled(alpha);
            rhs.axpy(beta, &matvec(&m, &v).unwrap());
            for k in 0..2 {
                let denom = rhs[k].abs().max(1.0);
                prop_assert!((lhs[k] - rhs[k]).abs() / denom < 1e-12);
            }
        }
    }
}
