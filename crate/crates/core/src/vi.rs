//! Variational baseline: Gaussian `q(u_k) = N(m_k, L_k L_kᵀ)` per class,
//! robust-max likelihood, and the Jensen lower bound
//! `Σ_i E_q[log p(y_i | f_i)] − Σ_k KL[q(u_k) ‖ p(u_k)]`.
//!
//! Under the robust-max likelihood `log p(y | f)` takes only two values, so the
//! expectation reduces to the probability `P` that the true latent is the
//! largest, computed by one Gauss–Hermite integral.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gaussian::{cholesky, log_det, MomentGaussian};
use crate::kernel::{contract_cross, contract_inducing, contract_self_variance, HyperGrad};
use crate::model::{GpParams, GradientVector};
use crate::normal::{cdf, pdf};
use crate::projection::{Priors, ProjectionBlock};
use crate::quadrature::rule;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Default label-noise level of the robust-max likelihood.
pub const EPSILON: f64 = 1e-3;

/// Variance floor for marginals of `f`.
const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub means: Vec<DVector<f64>>,
    /// Lower-triangular factors with positive diagonal.
    pub chol: Vec<DMatrix<f64>>,
}

impl VariationalState {
    /// `q = p`: zero means and `L = chol(K)`.
    pub fn from_prior(priors: &Priors) -> Self {
        Self {
            means: priors.classes.iter().map(|p| DVector::zeros(p.m())).collect(),
            chol: priors.classes.iter().map(|p| p.chol.l()).collect(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.means.len()
    }

    pub fn m(&self) -> usize {
        self.means[0].len()
    }

    pub fn cov(&self, c: usize) -> DMatrix<f64> {
        &self.chol[c] * self.chol[c].transpose()
    }

    pub fn moments(&self) -> Vec<MomentGaussian> {
        (0..self.n_classes())
            .map(|c| MomentGaussian { mean: self.means[c].clone(), cov: self.cov(c) })
            .collect()
    }

    /// Unconstrained parameters per class: the mean, then the lower triangle
    /// row by row with the diagonal in log space.
    pub fn to_flat(&self) -> Vec<f64> {
        let m = self.m();
        let mut v = Vec::with_capacity(self.n_classes() * (m + m * (m + 1) / 2));
        for c in 0..self.n_classes() {
            v.extend(self.means[c].iter());
            for i in 0..m {
                for j in 0..=i {
                    let l = self.chol[c][(i, j)];
                    v.push(if i == j { l.ln() } else { l });
                }
            }
        }
        v
    }

    pub fn from_flat(n_classes: usize, m: usize, flat: &[f64]) -> Result<Self> {
        let block = m + m * (m + 1) / 2;
        if flat.len() != n_classes * block {
            return Err(Error::Dimension("variational parameter vector has the wrong length".into()));
        }
        let mut means = Vec::with_capacity(n_classes);
        let mut chol = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            let b = &flat[c * block..(c + 1) * block];
            means.push(DVector::from_column_slice(&b[..m]));
            let mut l = DMatrix::zeros(m, m);
            let mut idx = m;
            for i in 0..m {
                for j in 0..=i {
                    l[(i, j)] = if i == j { b[idx].exp() } else { b[idx] };
                    idx += 1;
                }
            }
            chol.push(l);
        }
        Ok(Self { means, chol })
    }

    pub fn flat_len(n_classes: usize, m: usize) -> usize {
        n_classes * (m + m * (m + 1) / 2)
    }
}

/// Marginals of the latents of one input under `q`, per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// `m̂ = υᵀm` and `ŝ = s + υᵀSυ` for each class at input `x`.
pub fn marginal_q(x: &[f64], state: &VariationalState, priors: &Priors) -> Result<Marginals> {
    let mut mean = Vec::with_capacity(priors.n_classes());
    let mut var = Vec::with_capacity(priors.n_classes());
    for (c, p) in priors.classes.iter().enumerate() {
        let proj = crate::projection::project(x, p)?;
        let lu = state.chol[c].transpose() * &proj.upsilon;
        mean.push(proj.upsilon.dot(&state.means[c]));
        var.push((proj.s + lu.norm_squared()).max(VAR_FLOOR));
    }
    Ok(Marginals { mean, var })
}

/// `(log(1 − ε + ε/C), log(ε/C))`: the two values of the log-likelihood.
fn log_lik_levels(n_classes: usize, epsilon: f64) -> (f64, f64) {
    let floor = epsilon / n_classes as f64;
    ((1.0 - epsilon + floor).ln(), floor.ln())
}

/// `P(f_y > f_k ∀k≠y)` under independent Gaussian marginals, and its
/// derivatives with respect to each marginal mean and variance.
fn win_probability(y: usize, marg: &Marginals, quad_order: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let gh = rule(quad_order);
    let c = marg.mean.len();
    let sd: Vec<f64> = marg.var.iter().map(|v| v.sqrt()).collect();
    let scale = (2.0 * marg.var[y]).sqrt();
    let mut p = 0.0;
    let mut dm = vec![0.0; c];
    let mut dv = vec![0.0; c];
    let mut z = vec![0.0; c];
    let mut phi = vec![0.0; c];
    for (&t, &w) in gh.nodes.iter().zip(&gh.weights) {
        let u = marg.mean[y] + scale * t;
        for k in (0..c).filter(|&k| k != y) {
            z[k] = (u - marg.mean[k]) / sd[k];
            phi[k] = cdf(z[k]);
        }
        let prod: f64 = (0..c).filter(|&k| k != y).map(|k| phi[k]).product();
        p += w * prod;
        // ∂prod/∂u, with each factor's partial product computed directly.
        let mut du = 0.0;
        for k in (0..c).filter(|&k| k != y) {
            let others: f64 = (0..c).filter(|&l| l != y && l != k).map(|l| phi[l]).product();
            let dk = pdf(z[k]) / sd[k] * others;
            du += dk;
            dm[k] -= w * dk;
            dv[k] -= w * dk * 0.5 * z[k] / sd[k];
        }
        dm[y] += w * du;
        dv[y] += w * du * t / scale;
    }
    (p, dm, dv)
}

/// `E_q[log p(y | f)]` with the robust-max likelihood:
/// `P·log(1 − ε + ε/C) + (1 − P)·log(ε/C)`.
pub fn expected_log_lik(y: usize, marg: &Marginals, epsilon: f64, quad_order: usize) -> f64 {
    let (hi, lo) = log_lik_levels(marg.mean.len(), epsilon);
    let (p, _, _) = win_probability(y, marg, quad_order);
    let p = p.clamp(0.0, 1.0);
    p * hi + (1.0 - p) * lo
}

/// `KL[N(m, LLᵀ) ‖ N(0, K)]` per class.
pub fn kl(state: &VariationalState, priors: &Priors) -> Vec<f64> {
    priors
        .classes
        .iter()
        .enumerate()
        .map(|(c, p)| {
            let l = &state.chol[c];
            let kinv_l = p.chol.solve(l);
            let trace: f64 = l.component_mul(&kinv_l).sum();
            let maha = state.means[c].dot(&p.chol.solve(&state.means[c]));
            let log_det_s: f64 = 2.0 * l.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>();
            0.5 * (trace + maha - p.m() as f64 + p.log_det - log_det_s)
        })
        .collect()
}

/// Per-class `(m̂, ŝ)` for a block of rows plus the projections used.
fn batch_marginals(
    x: &DMatrix<f64>,
    state: &VariationalState,
    priors: &Priors,
) -> Result<(Vec<ProjectionBlock>, Vec<Marginals>)> {
    let blocks = priors
        .classes
        .par_iter()
        .map(|p| ProjectionBlock::compute(x, p))
        .collect::<Result<Vec<_>>>()?;
    let n = x.nrows();
    let per_class: Vec<(DVector<f64>, DVector<f64>)> = blocks
        .iter()
        .enumerate()
        .map(|(c, b)| {
            let mean = &b.upsilon * &state.means[c];
            let lu = &b.upsilon * &state.chol[c];
            let var = DVector::from_fn(n, |i, _| (b.s[i] + lu.row(i).norm_squared()).max(VAR_FLOOR));
            (mean, var)
        })
        .collect();
    let marg = (0..n)
        .map(|i| Marginals {
            mean: per_class.iter().map(|(m, _)| m[i]).collect(),
            var: per_class.iter().map(|(_, v)| v[i]).collect(),
        })
        .collect();
    Ok((blocks, marg))
}

/// Settings of the bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboConfig {
    pub epsilon: f64,
    pub quad_order: usize,
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self { epsilon: EPSILON, quad_order: crate::predict::QUAD_ORDER }
    }
}

pub fn elbo(data: &Dataset, state: &VariationalState, priors: &Priors, cfg: &ElboConfig) -> Result<f64> {
    let (_, marg) = batch_marginals(&data.x, state, priors)?;
    let ell: f64 = marg
        .par_iter()
        .zip(data.y.par_iter())
        .map(|(m, &y)| expected_log_lik(y, m, cfg.epsilon, cfg.quad_order))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(ell - kl(state, priors).iter().sum::<f64>())
}

/// Gradient of the bound (data term over `rows`, scaled by `N/|rows|`).
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGrad {
    /// Estimate of the bound itself.
    pub value: f64,
    /// Same layout as [`VariationalState::to_flat`].
    pub variational: Vec<f64>,
    pub params: GradientVector,
}

pub fn elbo_grad(
    data: &Dataset,
    rows: &[usize],
    state: &VariationalState,
    params: &GpParams,
    priors: &Priors,
    cfg: &ElboConfig,
) -> Result<ElboGrad> {
    if rows.is_empty() {
        return Err(Error::Config("minibatch must be nonempty".into()));
    }
    let rho = data.len() as f64 / rows.len() as f64;
    let xb = data.x.select_rows(rows);
    let (blocks, marg) = batch_marginals(&xb, state, priors)?;
    let (hi, lo) = log_lik_levels(data.n_classes, cfg.epsilon);
    let per_row: Vec<(f64, Vec<f64>, Vec<f64>)> = marg
        .par_iter()
        .zip(rows.par_iter())
        .map(|(m, &i)| {
            let (p, dm, dv) = win_probability(data.y[i], m, cfg.quad_order);
            let gap = hi - lo;
            let pc = p.clamp(0.0, 1.0);
            (pc * hi + (1.0 - pc) * lo, dm.iter().map(|d| d * gap).collect(), dv.iter().map(|d| d * gap).collect())
        })
        .collect();
    let kls = kl(state, priors);
    let value = rho * per_row.iter().map(|r| r.0).sum::<f64>() - kls.iter().sum::<f64>();
    let n = rows.len();
    let m = state.m();
    let block_len = m + m * (m + 1) / 2;
    let per_class: Vec<(Vec<f64>, HyperGrad, DMatrix<f64>)> = (0..data.n_classes)
        .into_par_iter()
        .map(|c| {
            let prior = &priors.classes[c];
            let h = params.hyper(c);
            let b = &blocks[c];
            let gm = DVector::from_fn(n, |t, _| rho * per_row[t].1[c]);
            let gs = DVector::from_fn(n, |t, _| rho * per_row[t].2[c]);
            let kinv = prior.k_inv();
            let s = state.cov(c);
            let mu = &state.means[c];
            let kinv_m = &kinv * mu;
            // Variational gradients.
            let y = &b.upsilon;
            let ys = DMatrix::from_fn(n, m, |i, j| y[(i, j)] * gs[i]);
            let l = &state.chol[c];
            let l_inv = l
                .solve_lower_triangular(&DMatrix::identity(m, m))
                .expect("variational factor has a positive diagonal");
            let s_inv = l_inv.transpose() * &l_inv;
            let g_mean = y.transpose() * &gm - &kinv_m;
            let g_cov = y.transpose() * &ys - &kinv * 0.5 + s_inv * 0.5;
            let g_l = g_cov * l * 2.0;
            let mut flat = Vec::with_capacity(block_len);
            flat.extend(g_mean.iter());
            for i in 0..m {
                for j in 0..=i {
                    flat.push(if i == j { g_l[(i, j)] * l[(i, j)] } else { g_l[(i, j)] });
                }
            }
            // Kernel gradients: data term through υ, s, κ; KL term through K.
            let mut hg = HyperGrad::zeros(h.dim());
            let mut gz = DMatrix::zeros(prior.m(), h.dim());
            let kinv_s = &kinv * &s;
            let p = y * kinv_s.transpose(); // rows K⁻¹Sυ_i
            let z = &gm * kinv_m.transpose() + DMatrix::from_fn(n, m, |i, j| 2.0 * gs[i] * p[(i, j)]);
            let cross = &z - &ys * 2.0;
            let yz = y.transpose() * &z;
            let mmat = &kinv - &kinv_s * &kinv - &kinv_m * kinv_m.transpose();
            let k_adj = y.transpose() * &ys - (&yz + yz.transpose()) * 0.5 - mmat * 0.5;
            contract_cross(&xb, &prior.z, &b.kxz, &cross, h, &mut hg, &mut gz);
            contract_self_variance(gs.sum(), h, &mut hg);
            contract_inducing(&prior.z, &prior.kzz, &k_adj, h, &mut hg, &mut gz);
            (flat, hg, gz)
        })
        .collect();
    let mut variational = Vec::with_capacity(data.n_classes * block_len);
    let mut pg = GradientVector::zeros(params.layout());
    for (c, (flat, hg, gz)) in per_class.into_iter().enumerate() {
        variational.extend(flat);
        pg.add_class(c, &hg, &gz);
    }
    Ok(ElboGrad { value, variational, params: pg })
}

/// Check that a factor is a valid Cholesky factor of a PD covariance.
pub fn validate(state: &VariationalState) -> Result<()> {
    for (c, l) in state.chol.iter().enumerate() {
        if l.diagonal().iter().any(|d| !(*d > 0.0)) {
            return Err(Error::NotPositiveDefinite { what: format!("variational covariance of class {c}") });
        }
        let s = l * l.transpose();
        let ch = cholesky(&s, "variational covariance")?;
        let _ = log_det(&ch);
    }
    Ok(())
}
