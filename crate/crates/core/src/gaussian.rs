//! Multivariate Gaussian bookkeeping in moment and natural form.
//!
//! Sites are stored in precision form, posteriors in moment form; conversions
//! go through Cholesky factorizations.

use crate::error::{Error, Result};
use crate::normal::HALF_LN_2PI;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

/// Relative jitter added to the diagonal when a factorization needs help.
pub const JITTER: f64 = 1e-8;

/// Gaussian in moment form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Gaussian in natural form: `precision = V⁻¹`, `shift = V⁻¹ m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalGaussian {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl MomentGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_natural(&self) -> Result<NaturalGaussian> {
        let chol = cholesky(&self.cov, "covariance")?;
        let mut precision = chol.inverse();
        symmetrize(&mut precision);
        let shift = chol.solve(&self.mean);
        Ok(NaturalGaussian { precision, shift })
    }

    /// Log-normalizer of the same distribution expressed in natural form.
    pub fn log_normalizer(&self) -> Result<f64> {
        let chol = cholesky(&self.cov, "covariance")?;
        let quad = self.mean.dot(&chol.solve(&self.mean));
        Ok(self.dim() as f64 * HALF_LN_2PI + 0.5 * log_det(&chol) + 0.5 * quad)
    }
}

impl NaturalGaussian {
    /// The unit factor: zero precision and zero shift.
    pub fn unit(dim: usize) -> Self {
        Self {
            precision: DMatrix::zeros(dim, dim),
            shift: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn to_moment(&self) -> Result<MomentGaussian> {
        let chol = cholesky(&self.precision, "precision")?;
        let mut cov = chol.inverse();
        symmetrize(&mut cov);
        let mean = chol.solve(&self.shift);
        Ok(MomentGaussian { mean, cov })
    }

    pub fn multiply(&self, other: &NaturalGaussian) -> NaturalGaussian {
        NaturalGaussian {
            precision: &self.precision + &other.precision,
            shift: &self.shift + &other.shift,
        }
    }

    pub fn divide(&self, other: &NaturalGaussian) -> NaturalGaussian {
        NaturalGaussian {
            precision: &self.precision - &other.precision,
            shift: &self.shift - &other.shift,
        }
    }
}

/// `g(θ) = D/2 log 2π + ½ log|Σ| + ½ μᵀ Σ⁻¹ μ`, evaluated from the precision
/// factor as `D/2 log 2π − ½ log|Λ| + ½ hᵀ Λ⁻¹ h`.
pub fn log_normalizer(g: &NaturalGaussian) -> Result<f64> {
    let chol = cholesky(&g.precision, "precision")?;
    let quad = g.shift.dot(&chol.solve(&g.shift));
    Ok(g.dim() as f64 * HALF_LN_2PI - 0.5 * log_det(&chol) + 0.5 * quad)
}

/// `(V⁻¹ − c·uuᵀ)⁻¹ = V + c·(Vu)(Vu)ᵀ / (1 − c·uᵀVu)`.
///
/// Fails with [`Error::CavityInvalid`] when the result is not positive definite.
pub fn rank_one_downdate(v: &DMatrix<f64>, u: &DVector<f64>, c: f64) -> Result<DMatrix<f64>> {
    if c == 0.0 {
        return Ok(v.clone());
    }
    let vu = v * u;
    let denom = 1.0 - c * u.dot(&vu);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::CavityInvalid);
    }
    let mut out = v + (&vu * vu.transpose()) * (c / denom);
    symmetrize(&mut out);
    Ok(out)
}

/// Plain Cholesky factorization; non-PD input is an error naming `what`.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("`{what}` is not square")));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite { what: what.to_string() })
}

/// Cholesky factorization that retries with escalating diagonal jitter
/// (starting at `JITTER` times the mean diagonal) before giving up.
pub fn cholesky_stabilized(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let scale = (m.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER * scale;
    for _ in 0..5 {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite { what: what.to_string() })
}

pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Replace `a` by `(a + aᵀ)/2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Solve `L x = b` for the lower factor of `chol`.
pub fn forward_solve(chol: &Cholesky<f64, Dyn>, b: &DVector<f64>) -> DVector<f64> {
    chol.l_dirty()
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn standard_normal_log_normalizers() {
        let g = NaturalGaussian {
            precision: DMatrix::identity(1, 1),
            shift: DVector::zeros(1),
        };
        assert!((log_normalizer(&g).unwrap() - 0.918_938_5).abs() < 1e-7);
        let g2 = NaturalGaussian {
            precision: DMatrix::identity(2, 2),
            shift: DVector::zeros(2),
        };
        assert!((log_normalizer(&g2).unwrap() - 1.837_877_1).abs() < 1e-7);
    }

    #[test]
    fn log_normalizer_matches_determinant_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = random_pd(&mut rng, 3);
        let mu = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let inv = sigma.clone().try_inverse().unwrap();
        let expected = 1.5 * (2.0 * std::f64::consts::PI).ln()
            + 0.5 * sigma.determinant().ln()
            + 0.5 * (mu.transpose() * &inv * &mu)[(0, 0)];
        let nat = NaturalGaussian {
            shift: &inv * &mu,
            precision: inv,
        };
        assert!((log_normalizer(&nat).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn non_pd_precision_is_reported() {
        let g = NaturalGaussian {
            precision: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            shift: DVector::zeros(2),
        };
        match log_normalizer(&g) {
            Err(Error::NotPositiveDefinite { what }) => assert_eq!(what, "precision"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn product_of_two_unit_variance_gaussians() {
        let a = NaturalGaussian {
            precision: DMatrix::identity(1, 1),
            shift: DVector::from_element(1, 0.0),
        };
        let b = NaturalGaussian {
            precision: DMatrix::identity(1, 1),
            shift: DVector::from_element(1, 1.0),
        };
        let p = a.multiply(&b);
        assert_eq!(p.precision[(0, 0)], 2.0);
        assert_eq!(p.shift[0], 1.0);
        let m = p.to_moment().unwrap();
        assert!((m.mean[0] - 0.5).abs() < 1e-15);
        assert!((m.cov[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(a.multiply(&NaturalGaussian::unit(1)), a);
    }

    #[test]
    fn downdate_scalar_and_zero() {
        let v = DMatrix::from_element(1, 1, 1.0);
        let u = DVector::from_element(1, 1.0);
        assert!((rank_one_downdate(&v, &u, 0.5).unwrap()[(0, 0)] - 2.0).abs() < 1e-15);
        assert_eq!(rank_one_downdate(&v, &u, 0.0).unwrap(), v);
        assert!(matches!(rank_one_downdate(&v, &u, 1.5), Err(Error::CavityInvalid)));
    }

    #[test]
    fn downdate_matches_dense_inverse_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 200 {
            let m = 1 + checked % 8;
            let v = random_pd(&mut rng, m);
            let u = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            let c = rng.random_range(-2.0..2.0);
            let dense = (v.clone().try_inverse().unwrap() - (&u * u.transpose()) * c).try_inverse();
            match rank_one_downdate(&v, &u, c) {
                Ok(w) => {
                    let dense = dense.unwrap();
                    let rel = (&w - &dense).norm() / dense.norm();
                    assert!(rel < 1e-8, "rel {rel}");
                    checked += 1;
                }
                Err(Error::CavityInvalid) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    proptest! {
        #[test]
        fn moment_natural_round_trip(seed in 0u64..10_000, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cov = random_pd(&mut rng, n);
            let mean = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            let g = MomentGaussian::new(mean, cov).unwrap();
            let back = g.to_natural().unwrap().to_moment().unwrap();
            prop_assert!((&back.mean - &g.mean).norm() <= 1e-8 * (1.0 + g.mean.norm()));
            prop_assert!((&back.cov - &g.cov).norm() <= 1e-8 * g.cov.norm());
        }

        #[test]
        fn divide_undoes_multiply(seed in 0u64..10_000, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = NaturalGaussian { precision: random_pd(&mut rng, n), shift: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)) };
            let b = NaturalGaussian { precision: random_pd(&mut rng, n), shift: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)) };
            let back = a.multiply(&b).divide(&b);
            prop_assert!((&back.precision - &a.precision).norm() <= 1e-10 * (1.0 + a.precision.norm()));
            prop_assert!((&back.shift - &a.shift).norm() <= 1e-10 * (1.0 + a.shift.norm()));
            prop_assert!(log_normalizer(&a.multiply(&b)).unwrap().is_finite());
        }
    }
}
