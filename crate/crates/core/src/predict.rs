//! Predictive latent distributions, class probabilities by Gauss–Hermite
//! quadrature, and test metrics.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gaussian::{cholesky, MomentGaussian};
use crate::kernel::{gram, KernelHyper};
use crate::model::GpParams;
use crate::normal::cdf;
use crate::quadrature::rule;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

/// Default Gauss–Hermite order.
pub const QUAD_ORDER: usize = 64;

/// Floor applied to the probability of the true class in the NLL.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-class mean and variance of the latent at a test input.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPredictive {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ClassModel {
    hyper: KernelHyper,
    z: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    q: MomentGaussian,
}

/// Gaussian `q` over each class's inducing values plus the kernel it lives
/// under; works for EP, SEP and VI posteriors alike.
#[derive(Debug, Clone)]
pub struct Predictor {
    classes: Vec<ClassModel>,
    pub quad_order: usize,
}

impl Predictor {
    pub fn new(params: &GpParams, posterior: &[MomentGaussian]) -> Result<Self> {
        if posterior.len() != params.n_classes() {
            return Err(Error::Dimension(format!(
                "{} posterior blocks for {} classes",
                posterior.len(),
                params.n_classes()
            )));
        }
        let classes = posterior
            .iter()
            .enumerate()
            .map(|(c, q)| {
                if q.dim() != params.n_inducing() {
                    return Err(Error::Dimension("posterior size differs from the inducing set".into()));
                }
                let h = params.hyper(c).clone();
                let z = params.inducing[c].clone();
                let kzz = crate::kernel::inducing_gram(&z, &h)?;
                let chol = cholesky(&kzz, "inducing prior covariance")?;
                Ok(ClassModel { hyper: h, z, chol, q: q.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { classes, quad_order: QUAD_ORDER })
    }

    pub fn from_engine(engine: &crate::ep::EpEngine) -> Result<Self> {
        let post: Vec<MomentGaussian> = engine.posterior.classes.iter().map(|q| q.moments()).collect();
        Self::new(&engine.params, &post)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.classes[0].z.ncols()
    }

    /// `m* = υᵀm`, `v* = κ − kᵀυ + υᵀVυ` per class, for every row of `x`.
    pub fn latent(&self, x: &DMatrix<f64>) -> Result<Vec<LatentPredictive>> {
        if x.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "inputs have {} features, model expects {}",
                x.ncols(),
                self.dim()
            )));
        }
        let per_class = self
            .classes
            .par_iter()
            .map(|cm| {
                let kxz = gram(x, &cm.z, &cm.hyper, false)?;
                let ups = cm.chol.solve(&kxz.transpose()); // M × n
                let kappa = cm.hyper.self_variance();
                let vu = &cm.q.cov * &ups;
                let means = ups.transpose() * &cm.q.mean;
                let vars: Vec<f64> = (0..x.nrows())
                    .map(|i| {
                        let u = ups.column(i);
                        (kappa - kxz.row(i).transpose().dot(&u) + u.dot(&vu.column(i))).max(f64::MIN_POSITIVE)
                    })
                    .collect();
                Ok((means, vars))
            })
            .collect::<Result<Vec<(DVector<f64>, Vec<f64>)>>>()?;
        Ok((0..x.nrows())
            .map(|i| LatentPredictive {
                mean: per_class.iter().map(|(m, _)| m[i]).collect(),
                var: per_class.iter().map(|(_, v)| v[i]).collect(),
            })
            .collect())
    }

    pub fn latent_at(&self, x: &[f64]) -> Result<LatentPredictive> {
        let xm = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.latent(&xm)?.remove(0))
    }

    /// Normalized class probabilities, one row per input.
    pub fn probabilities(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let lat = self.latent(x)?;
        let c = self.n_classes();
        let rows: Vec<Vec<f64>> = lat.par_iter().map(|l| class_probabilities(l, self.quad_order)).collect();
        Ok(DMatrix::from_fn(x.nrows(), c, |i, j| rows[i][j]))
    }
}

/// Unnormalized `p(y | x*) = E_{u ~ N(m_y, v_y)}[Π_{k≠y} Φ((u − m_k)/√v_k)]`
/// for every class `y`.
pub fn class_probabilities_raw(lat: &LatentPredictive, quad_order: usize) -> Vec<f64> {
    let gh = rule(quad_order);
    let c = lat.mean.len();
    let sd: Vec<f64> = lat.var.iter().map(|v| v.sqrt()).collect();
    (0..c)
        .map(|y| {
            gh.expect(lat.mean[y], lat.var[y], |u| {
                (0..c).filter(|&k| k != y).map(|k| cdf((u - lat.mean[k]) / sd[k])).product()
            })
        })
        .collect()
}

/// [`class_probabilities_raw`] rescaled to sum to one.
pub fn class_probabilities(lat: &LatentPredictive, quad_order: usize) -> Vec<f64> {
    let raw = class_probabilities_raw(lat, quad_order);
    let total: f64 = raw.iter().sum();
    if total > 0.0 && total.is_finite() {
        raw.iter().map(|p| p / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

/// Error rate and mean negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub error_rate: f64,
    pub nll: f64,
}

/// Metrics of probability rows `probs` (`n × C`) against labels.
pub fn metrics(probs: &DMatrix<f64>, y: &[usize]) -> Result<Metrics> {
    if probs.nrows() != y.len() {
        return Err(Error::Dimension("probability rows differ from label count".into()));
    }
    if y.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= probs.ncols()) {
        return Err(Error::Data(format!("label {bad} out of range for {} classes", probs.ncols())));
    }
    let mut errors = 0usize;
    let mut nll = 0.0;
    for (i, &label) in y.iter().enumerate() {
        let row = probs.row(i);
        if row.transpose().argmax().0 != label {
            errors += 1;
        }
        nll -= row[label].max(PROB_FLOOR).ln();
    }
    let n = y.len() as f64;
    Ok(Metrics { error_rate: errors as f64 / n, nll: nll / n })
}

pub fn evaluate(predictor: &Predictor, test: &Dataset) -> Result<Metrics> {
    if test.n_classes != predictor.n_classes() {
        return Err(Error::Dimension(format!(
            "test set has {} classes, model {}",
            test.n_classes,
            predictor.n_classes()
        )));
    }
    metrics(&predictor.probabilities(&test.x)?, &test.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelHyper;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lat(mean: &[f64], var: &[f64]) -> LatentPredictive {
        LatentPredictive { mean: mean.to_vec(), var: var.to_vec() }
    }

    #[test]
    fn identical_classes_are_uniform() {
        for c in 2..6 {
            let p = class_probabilities_raw(&lat(&vec![0.3; c], &vec![0.7; c]), QUAD_ORDER);
            for v in p {
                assert!((v - 1.0 / c as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn two_classes_match_probit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let v = [rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)];
            let p = class_probabilities_raw(&lat(&m, &v), QUAD_ORDER);
            let exact = cdf((m[0] - m[1]) / (v[0] + v[1]).sqrt());
            assert!((p[0] - exact).abs() < 1e-8);
        }
    }

    #[test]
    fn raw_probabilities_nearly_partition_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let m: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..2.0)).collect();
            let s: f64 = class_probabilities_raw(&lat(&m, &v), QUAD_ORDER).iter().sum();
            assert!((s - 1.0).abs() < 1e-4, "{s}");
        }
    }

    #[test]
    fn metric_edge_cases() {
        let onehot = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let m = metrics(&onehot, &[0, 2]).unwrap();
        assert_eq!(m.error_rate, 0.0);
        assert!(m.nll.abs() < 1e-12);
        let uniform = DMatrix::from_element(4, 3, 1.0 / 3.0);
        let m = metrics(&uniform, &[0, 1, 2, 0]).unwrap();
        assert!((m.nll - 3f64.ln()).abs() < 1e-12);
        let wrong = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!((metrics(&wrong, &[1]).unwrap().nll + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn prior_predictive_is_the_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = KernelHyper::new(2, 0.8, 1.1, 0.2);
        let z: Vec<DMatrix<f64>> = (0..3).map(|_| DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0))).collect();
        let params = GpParams::new(vec![h.clone()], z).unwrap();
        let priors = crate::projection::Priors::new(&params).unwrap();
        let post: Vec<MomentGaussian> = priors
            .classes
            .iter()
            .map(|p| MomentGaussian { mean: DVector::zeros(4), cov: p.kzz.clone() })
            .collect();
        let pred = Predictor::new(&params, &post).unwrap();
        let l = pred.latent_at(&[0.2, -0.4]).unwrap();
        for c in 0..3 {
            assert_eq!(l.mean[c], 0.0);
            assert!((l.var[c] - h.self_variance()).abs() < 1e-10);
        }
        let p = pred.probabilities(&DMatrix::from_row_slice(1, 2, &[0.2, -0.4])).unwrap();
        assert!((p.row(0).sum() - 1.0).abs() < 1e-15);
    }
}
