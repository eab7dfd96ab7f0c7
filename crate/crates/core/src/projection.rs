//! FITC conditionals linking data points to a class's inducing set.
//!
//! For a point `x` and class `k`: `υ = K⁻¹k` and `s = κ − kᵀK⁻¹k`, where `K`
//! is the inducing Gram, `k` the cross covariances and `κ` the (noisy) prior
//! variance of `x`.

use crate::error::{Error, Result};
use crate::gaussian::{cholesky, log_det, MomentGaussian};
use crate::kernel::{gram, inducing_gram, KernelHyper};
use crate::model::GpParams;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

/// Prior over one class's inducing values: `u ~ N(0, K)`.
#[derive(Debug, Clone)]
pub struct InducingPrior {
    pub z: DMatrix<f64>,
    pub hyper: KernelHyper,
    pub kzz: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    pub log_det: f64,
}

impl InducingPrior {
    pub fn new(z: &DMatrix<f64>, hyper: &KernelHyper) -> Result<Self> {
        let kzz = inducing_gram(z, hyper)?;
        let chol = cholesky(&kzz, "inducing prior covariance")?;
        let log_det = log_det(&chol);
        Ok(Self { z: z.clone(), hyper: hyper.clone(), kzz, chol, log_det })
    }

    pub fn m(&self) -> usize {
        self.z.nrows()
    }

    pub fn k_inv(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Inducing priors of every class.
#[derive(Debug, Clone)]
pub struct Priors {
    pub classes: Vec<InducingPrior>,
}

impl Priors {
    pub fn new(params: &GpParams) -> Result<Self> {
        let classes = (0..params.n_classes())
            .into_par_iter()
            .map(|c| InducingPrior::new(&params.inducing[c], params.hyper(c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { classes })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

/// FITC quantities of a single point for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub upsilon: DVector<f64>,
    pub s: f64,
}

/// Tolerance below which a negative conditional variance is rounding error.
const NEG_TOL: f64 = 1e-10;

/// `υ` solving `K υ = k` and `s = κ − kᵀυ`.
pub fn project(x: &[f64], prior: &InducingPrior) -> Result<Projection> {
    if x.len() != prior.hyper.dim() {
        return Err(Error::Dimension(format!(
            "point has {} coordinates, kernel expects {}",
            x.len(),
            prior.hyper.dim()
        )));
    }
    let xm = DMatrix::from_row_slice(1, x.len(), x);
    let k = gram(&prior.z, &xm, &prior.hyper, false)?.column(0).into_owned();
    let upsilon = prior.chol.solve(&k);
    let s = conditional_variance(prior.hyper.self_variance() - k.dot(&upsilon))?;
    Ok(Projection { upsilon, s })
}

fn conditional_variance(s: f64) -> Result<f64> {
    if s < -NEG_TOL * 1e3 || !s.is_finite() {
        return Err(Error::NotPositiveDefinite { what: "FITC conditional variance".into() });
    }
    Ok(s.max(0.0))
}

/// Mean and variance of `f = υᵀu + N(0, s)` under `u ~ cavity`:
/// `a = υᵀm`, `b = s + υᵀVυ`.
pub fn cavity_project(p: &Projection, cavity: &MomentGaussian) -> Result<(f64, f64)> {
    if cavity.dim() != p.upsilon.len() {
        return Err(Error::Dimension("cavity and projection sizes differ".into()));
    }
    let a = p.upsilon.dot(&cavity.mean);
    let b = p.s + p.upsilon.dot(&(&cavity.cov * &p.upsilon));
    if !(b > 0.0) {
        return Err(Error::CavityInvalid);
    }
    Ok((a, b))
}

/// Projections of a block of rows onto one class: cross Gram `kxz` (`n × M`),
/// `υ` as rows of `upsilon`, and conditional variances `s`.
#[derive(Debug, Clone)]
pub struct ProjectionBlock {
    pub kxz: DMatrix<f64>,
    pub upsilon: DMatrix<f64>,
    pub s: DVector<f64>,
}

impl ProjectionBlock {
    pub fn compute(x: &DMatrix<f64>, prior: &InducingPrior) -> Result<Self> {
        let kxz = gram(x, &prior.z, &prior.hyper, false)?;
        let upsilon = prior.chol.solve(&kxz.transpose()).transpose();
        let kappa = prior.hyper.self_variance();
        let s = (0..x.nrows())
            .map(|i| conditional_variance(kappa - kxz.row(i).dot(&upsilon.row(i))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kxz, upsilon, s: DVector::from_vec(s) })
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn projection(&self, row: usize) -> Projection {
        Projection {
            upsilon: self.upsilon.row(row).transpose(),
            s: self.s[row],
        }
    }
}

/// Per-class projections of a set of data rows.
#[derive(Debug, Clone)]
pub struct Projections {
    /// Data-row indices, in block order.
    pub rows: Vec<usize>,
    pub classes: Vec<ProjectionBlock>,
}

impl Projections {
    pub fn compute(x: &DMatrix<f64>, rows: &[usize], priors: &Priors) -> Result<Self> {
        let xb = x.select_rows(rows);
        let classes = priors
            .classes
            .par_iter()
            .map(|p| ProjectionBlock::compute(&xb, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows: rows.to_vec(), classes })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
