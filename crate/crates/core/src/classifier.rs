//! Classifier heads: the frozen simplex equiangular tight frame, a frozen
//! random head, and an ordinary trainable head.
//!
//! Class vectors are stored as rows, `V ∈ R^{C×d}`, so logits are `z = f Vᵀ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, norm, random_orthogonal, standard_normal, Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// Frozen simplex ETF.
    Etf,
    /// Frozen scaled-Gaussian head.
    Random,
    /// Learned jointly with the extractor.
    Trainable,
}

impl ClassifierKind {
    pub fn is_frozen(self) -> bool {
        !matches!(self, ClassifierKind::Trainable)
    }
}

/// `C` class vectors of dimension `d`.
///
/// The vectors can only be changed through [`ClassifierMatrix::apply_update`],
/// which refuses frozen heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMatrix {
    kind: ClassifierKind,
    vectors: Matrix,
}

/// Worst-case deviations from the ETF conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtfReport {
    /// `max_c |‖v_c‖ − 1|`
    pub max_norm_deviation: f64,
    /// `max_{i≠j} |cos(v_i, v_j) + 1/(C−1)|`
    pub max_cosine_deviation: f64,
}

impl ClassifierMatrix {
    /// Builds `V = sqrt(C/(C−1)) · U (I_C − 11ᵀ/C)` from a random orthonormal
    /// `U ∈ R^{d×C}` and stores its columns as rows.
    pub fn build_etf(d: usize, classes: usize, rng: &SeededRng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Parameter(format!(
                "an ETF needs at least 2 classes, got {classes}"
            )));
        }
        if d < classes {
            return Err(Error::Dimension(format!(
                "ETF with {classes} classes needs feature dimension >= {classes}, got {d}"
            )));
        }
        let u = random_orthogonal(d, classes, rng)?;
        let c = classes as f64;
        let centering = Matrix::from_fn(classes, classes, |i, j| {
            f64::from(u8::from(i == j)) - 1.0 / c
        });
        let scale = (c / (c - 1.0)).sqrt();
        let mut v = u.matmul(&centering)?;
        for x in v.as_mut_slice() {
            *x *= scale;
        }
        Ok(ClassifierMatrix {
            kind: ClassifierKind::Etf,
            vectors: v.transpose(),
        })
    }

    /// Frozen head with entries drawn from `N(0, 1/d)`.
    pub fn build_random_frozen(d: usize, classes: usize, rng: &SeededRng) -> Result<Self> {
        Self::gaussian(d, classes, rng, ClassifierKind::Random)
    }

    /// Trainable head with the same `N(0, 1/d)` initialization.
    pub fn build_trainable(d: usize, classes: usize, rng: &SeededRng) -> Result<Self> {
        Self::gaussian(d, classes, rng, ClassifierKind::Trainable)
    }

    pub fn build(kind: ClassifierKind, d: usize, classes: usize, rng: &SeededRng) -> Result<Self> {
        match kind {
            ClassifierKind::Etf => Self::build_etf(d, classes, rng),
            ClassifierKind::Random => Self::build_random_frozen(d, classes, rng),
            ClassifierKind::Trainable => Self::build_trainable(d, classes, rng),
        }
    }

    fn gaussian(d: usize, classes: usize, rng: &SeededRng, kind: ClassifierKind) -> Result<Self> {
        if d == 0 {
            return Err(Error::Parameter("feature dimension must be >= 1".into()));
        }
        if classes < 2 {
            return Err(Error::Parameter(format!(
                "classifier needs at least 2 classes, got {classes}"
            )));
        }
        let mut stream = rng.stream();
        let scale = 1.0 / (d as f64).sqrt();
        let vectors = Matrix::from_fn(classes, d, |_, _| scale * standard_normal(&mut stream));
        Ok(ClassifierMatrix { kind, vectors })
    }

    /// Wraps existing class vectors (one row per class).
    pub fn from_vectors(kind: ClassifierKind, vectors: Matrix) -> Result<Self> {
        if vectors.rows() < 2 || vectors.cols() == 0 {
            return Err(Error::Dimension(format!(
                "classifier must be at least 2x1, got {}x{}",
                vectors.rows(),
                vectors.cols()
            )));
        }
        Ok(ClassifierMatrix { kind, vectors })
    }

    pub fn kind(&self) -> ClassifierKind {
        self.kind
    }

    pub fn is_frozen(&self) -> bool {
        self.kind.is_frozen()
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn vector(&self, class: usize) -> &[f64] {
        self.vectors.row(class)
    }

    /// `z = f Vᵀ`.
    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.vectors.matvec(feature)
    }

    /// `V ← V + alpha · delta`. Frozen heads refuse.
    pub fn apply_update(&mut self, alpha: f64, delta: &Matrix) -> Result<()> {
        if self.is_frozen() {
            return Err(Error::Contract(format!(
                "attempted to update a frozen {:?} classifier",
                self.kind
            )));
        }
        if delta.shape() != self.vectors.shape() {
            return Err(Error::Dimension("classifier update shape mismatch".into()));
        }
        for (v, d) in self.vectors.as_mut_slice().iter_mut().zip(delta.as_slice()) {
            *v += alpha * d;
        }
        Ok(())
    }

    /// Overwrites trainable vectors from a flat row-major slice.
    pub(crate) fn set_trainable_from_slice(&mut self, values: &[f64]) -> Result<()> {
        if self.is_frozen() {
            return Err(Error::Contract("cannot overwrite a frozen classifier".into()));
        }
        if values.len() != self.vectors.as_slice().len() {
            return Err(Error::Dimension("classifier slice length mismatch".into()));
        }
        self.vectors.as_mut_slice().copy_from_slice(values);
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn vectors_mut_unchecked(&mut self) -> &mut Matrix {
        &mut self.vectors
    }

    /// Measures how far an ETF head is from the ETF conditions.
    pub fn validate_etf(&self) -> Result<EtfReport> {
        if self.kind != ClassifierKind::Etf {
            return Err(Error::Contract(format!(
                "validate_etf called on a {:?} classifier",
                self.kind
            )));
        }
        let classes = self.num_classes();
        let target = -1.0 / (classes as f64 - 1.0);
        let max_norm_deviation = self
            .vectors
            .row_iter()
            .map(|v| (norm(v) - 1.0).abs())
            .fold(0.0, f64::max);
        let mut max_cosine_deviation: f64 = 0.0;
        for i in 0..classes {
            for j in (i + 1)..classes {
                let cos = cosine(self.vector(i), self.vector(j))?;
                max_cosine_deviation = max_cosine_deviation.max((cos - target).abs());
            }
        }
        Ok(EtfReport {
            max_norm_deviation,
            max_cosine_deviation,
        })
    }

    /// `‖(1/C) Σ_c v_c‖`.
    pub fn mean_vector_norm(&self) -> f64 {
        let classes = self.num_classes() as f64;
        let mean = self
            .vectors
            .t_matvec(&vec![1.0 / classes; self.num_classes()])
            .expect("shape is consistent by construction");
        norm(&mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;

    #[test]
    fn etf_two_classes_are_antipodal() {
        let v = ClassifierMatrix::build_etf(2, 2, &SeededRng::new(1)).unwrap();
        let cos = cosine(v.vector(0), v.vector(1)).unwrap();
        assert!((cos + 1.0).abs() < 1e-9);
    }

    #[test]
    fn etf_four_classes_cosines() {
        for d in [4, 5, 9] {
            let v = ClassifierMatrix::build_etf(d, 4, &SeededRng::new(d as u64)).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    if i != j {
                        let cos = cosine(v.vector(i), v.vector(j)).unwrap();
                        assert!((cos + 1.0 / 3.0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn etf_rows_are_unit() {
        let v = ClassifierMatrix::build_etf(16, 10, &SeededRng::new(3)).unwrap();
        for c in 0..10 {
            assert!((norm(v.vector(c)) - 1.0).abs() < 1e-9);
        }
        assert!(v.is_frozen());
        assert_eq!(v.kind(), ClassifierKind::Etf);
    }

    #[test]
    fn etf_parameter_errors() {
        assert!(matches!(
            ClassifierMatrix::build_etf(3, 4, &SeededRng::new(0)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            ClassifierMatrix::build_etf(3, 1, &SeededRng::new(0)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn etf_invariants_across_sizes() {
        for classes in [2, 3, 4, 10, 100] {
            let v = ClassifierMatrix::build_etf(classes, classes, &SeededRng::new(42)).unwrap();
            let report = v.validate_etf().unwrap();
            assert!(report.max_norm_deviation < 1e-9, "{classes}: {report:?}");
            assert!(report.max_cosine_deviation < 1e-9, "{classes}: {report:?}");
            assert!(v.mean_vector_norm() < 1e-9);
        }
    }

    #[test]
    fn etf_cosines_survive_rotation() {
        let (d, classes) = (12, 5);
        let v = ClassifierMatrix::build_etf(d, classes, &SeededRng::new(8)).unwrap();
        let rot = random_orthogonal(d, d, &SeededRng::new(99)).unwrap();
        let rotated = v.vectors().matmul(&rot).unwrap();
        for i in 0..classes {
            for j in 0..classes {
                let before = cosine(v.vector(i), v.vector(j)).unwrap();
                let after = cosine(rotated.row(i), rotated.row(j)).unwrap();
                assert!((before - after).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn validate_detects_scaled_row_and_ignores_permutation() {
        let v = ClassifierMatrix::build_etf(6, 4, &SeededRng::new(5)).unwrap();
        let fresh = v.validate_etf().unwrap();
        assert!(fresh.max_norm_deviation < 1e-9 && fresh.max_cosine_deviation < 1e-9);

        let mut scaled = v.clone();
        for x in scaled.vectors_mut_unchecked().row_mut(2) {
            *x *= 2.0;
        }
        let r = scaled.validate_etf().unwrap();
        assert!((r.max_norm_deviation - 1.0).abs() < 1e-12);

        let mut swapped = v.clone();
        swapped.vectors_mut_unchecked().swap_rows(0, 3);
        let r = swapped.validate_etf().unwrap();
        assert!(r.max_norm_deviation < 1e-9 && r.max_cosine_deviation < 1e-9);

        let random = ClassifierMatrix::build_random_frozen(6, 4, &SeededRng::new(5)).unwrap();
        assert!(matches!(random.validate_etf(), Err(Error::Contract(_))));
    }

    #[test]
    fn random_head_is_deterministic_and_frozen() {
        let a = ClassifierMatrix::build_random_frozen(8, 3, &SeededRng::new(4)).unwrap();
        let b = ClassifierMatrix::build_random_frozen(8, 3, &SeededRng::new(4)).unwrap();
        assert_eq!(a, b);
        let mut c = a.clone();
        let delta = Matrix::zeros(3, 8);
        assert!(matches!(c.apply_update(1.0, &delta), Err(Error::Contract(_))));
        assert_eq!(c, a);
    }

    #[test]
    fn random_head_row_norms_near_one() {
        // ‖v‖² ~ χ²_d / d, so E‖v‖ → 1 as d grows.
        let mut total = 0.0;
        let mut count = 0.0;
        for seed in 0..100 {
            let v = ClassifierMatrix::build_random_frozen(64, 10, &SeededRng::new(seed)).unwrap();
            for c in 0..10 {
                total += norm(v.vector(c));
                count += 1.0;
            }
        }
        assert!((total / count - 1.0).abs() < 0.25);
    }

    #[test]
    fn trainable_head_accepts_updates() {
        let mut v = ClassifierMatrix::build_trainable(4, 3, &SeededRng::new(1)).unwrap();
        let before = v.clone();
        let delta = Matrix::from_fn(3, 4, |r, c| (r + c) as f64);
        v.apply_update(-0.5, &delta).unwrap();
        assert_eq!(v.vectors()[(2, 3)], before.vectors()[(2, 3)] - 2.5);
    }

    #[test]
    fn logits_are_row_dots() {
        let v = ClassifierMatrix::build_etf(5, 3, &SeededRng::new(2)).unwrap();
        let f = [0.3, -1.0, 2.0, 0.5, 0.0];
        let z = v.logits(&f).unwrap();
        for c in 0..3 {
            assert_eq!(z[c], dot(v.vector(c), &f));
        }
    }
}
