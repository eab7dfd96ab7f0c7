//! The EP estimate of the log marginal likelihood and its gradient.
//!
//! `log Z_q = Σ_c [g(θ_c) − g(θ_prior,c)] + Σ_{i,k≠y_i} log s̃_{i,k}` with
//! `log s̃ = log Z_{i,k} + g(θ^{\i,k}) − g(θ)`. The site terms are evaluated
//! from the current `q` and the current site parameters, so at an EP fixed
//! point the objective is stationary in the sites. Unit (never updated) sites
//! contribute nothing.

use crate::data::Dataset;
use crate::ep::{other_classes, BatchContext, EpEngine, SiteState, Tilted};
use crate::error::{Error, Result};
use crate::kernel::{contract_cross, contract_inducing, contract_self_variance, HyperGrad};
use crate::model::GradientVector;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Per-row gradient coefficients on one class block (see [`data_terms`]).
#[derive(Debug, Clone)]
struct ClassCoefficients {
    /// Σ ∂log Z/∂a over the roles the row plays on this class.
    s1: DVector<f64>,
    /// Coefficient of `A_base⁻¹ k` in the adjoint of `K⁻¹`-mapped cavities.
    s2: DVector<f64>,
    /// Σ ∂log Z/∂b.
    sb: DVector<f64>,
}

#[derive(Debug, Clone)]
struct DataTerms {
    /// Σ log Z_{i,k} over active sites.
    log_z: f64,
    /// Σ over active sites of `g(θ^{\i,k}) − g(θ)` (full EP only).
    drop: f64,
    classes: Vec<ClassCoefficients>,
}

/// One role of a row on a class block: `(class, ∂a, coefficient, ∂b)`.
type Role = (usize, f64, f64, f64);

fn data_terms(engine: &EpEngine, data: &Dataset, ctx: &BatchContext) -> Result<DataTerms> {
    let n = ctx.proj.len();
    let c = engine.n_classes();
    let rows: Vec<Result<(f64, f64, Vec<Role>)>> = (0..n)
        .into_par_iter()
        .map(|t| {
            let i = ctx.proj.rows[t];
            let y = data.y[i];
            let mut log_z = 0.0;
            let mut drop = 0.0;
            let mut roles = Vec::with_capacity(2 * (c - 1));
            for k in other_classes(y, c) {
                if !engine.site_active(i, y, k) {
                    continue;
                }
                let site = engine.removal(i, y, k);
                let cav = engine.site_cavity(ctx, t, y, k)?;
                let tl = Tilted::new(&cav)?;
                log_z += tl.log_z;
                if matches!(engine.sites, SiteState::Full(_)) {
                    drop += cav.y.log_normalizer_drop(site.c1_y, site.c2_y)
                        + cav.k.log_normalizer_drop(site.c1_k, site.c2_k);
                }
                let (ga, gb) = (tl.d_mean(), tl.d_var());
                let coef = |ga: f64, c1: f64, c2: f64, mm: f64, den: f64| (ga * (c1 * mm - c2) + 2.0 * gb) / den;
                roles.push((y, ga, coef(ga, site.c1_y, site.c2_y, cav.y.mm, cav.y.den), gb));
                roles.push((k, -ga, coef(-ga, site.c1_k, site.c2_k, cav.k.mm, cav.k.den), gb));
            }
            Ok((log_z, drop, roles))
        })
        .collect();
    let mut out = DataTerms {
        log_z: 0.0,
        drop: 0.0,
        classes: vec![
            ClassCoefficients { s1: DVector::zeros(n), s2: DVector::zeros(n), sb: DVector::zeros(n) };
            c
        ],
    };
    for (t, row) in rows.into_iter().enumerate() {
        let (lz, dr, roles) = row?;
        out.log_z += lz;
        out.drop += dr;
        for (cls, ga, co, gb) in roles {
            let cc = &mut out.classes[cls];
            cc.s1[t] += ga;
            cc.s2[t] += co;
            cc.sb[t] += gb;
        }
    }
    Ok(out)
}

/// `Σ_c [g(θ_c) − g(θ_prior,c)]`, plus under SEP the class-level
/// `Σ_c n_c [g(θ_c^\) − g(θ_c)]` of the tied cavities.
fn global_terms(engine: &EpEngine, ctx: &BatchContext) -> f64 {
    let mut total: f64 = engine
        .posterior
        .classes
        .iter()
        .zip(&engine.priors.classes)
        .map(|(q, p)| q.log_normalizer_gain(p))
        .sum();
    if let SiteState::Tied(t) = &engine.sites {
        if t.active {
            for (c, (q, base)) in engine.posterior.classes.iter().zip(&ctx.bases).enumerate() {
                let drop = 0.5 * (q.log_det_a - q.r.dot(&q.a_inv_r) - base.log_det + base.r.dot(&base.w));
                total += t.counts[c] as f64 * drop;
            }
        }
    }
    total
}

fn all_rows(data: &Dataset) -> Vec<usize> {
    (0..data.len()).collect()
}

/// `log Z_q` over the whole training set.
pub fn log_zq(engine: &EpEngine, data: &Dataset) -> Result<f64> {
    let ctx = engine.batch_context(data, &all_rows(data))?;
    let terms = data_terms(engine, data, &ctx)?;
    Ok(global_terms(engine, &ctx) + terms.log_z + terms.drop)
}

/// Unbiased estimate of `log Z_q` from a minibatch: data terms scaled by
/// `N/|batch|`.
pub fn log_zq_estimate(engine: &EpEngine, data: &Dataset, batch: &[usize]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("minibatch must be nonempty".into()));
    }
    let ctx = engine.batch_context(data, batch)?;
    let terms = data_terms(engine, data, &ctx)?;
    let rho = data.len() as f64 / batch.len() as f64;
    Ok(global_terms(engine, &ctx) + rho * (terms.log_z + terms.drop))
}

/// Gradient of `log Z_q` with respect to every kernel hyper-parameter and
/// inducing coordinate. The prior term is `−½ tr(M ∂K/∂ξ)` with
/// `M = K⁻¹ − A⁻¹ − (A⁻¹r)(A⁻¹r)ᵀ`; the data term differentiates each
/// `log Z_{i,k}` through `υ`, `s` and `κ` with the cavity held fixed.
pub fn grad_log_zq(engine: &EpEngine, data: &Dataset) -> Result<GradientVector> {
    gradient(engine, data, &all_rows(data), 1.0)
}

/// Stochastic gradient: exact prior term, data term over `batch` scaled by
/// `N/|batch|`.
pub fn stochastic_grad(engine: &EpEngine, data: &Dataset, batch: &[usize]) -> Result<GradientVector> {
    if batch.is_empty() {
        return Err(Error::Config("minibatch must be nonempty".into()));
    }
    gradient(engine, data, batch, data.len() as f64 / batch.len() as f64)
}

fn scale_rows(m: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * s[i])
}

fn gradient(engine: &EpEngine, data: &Dataset, rows: &[usize], rho: f64) -> Result<GradientVector> {
    let ctx = engine.batch_context(data, rows)?;
    let terms = data_terms(engine, data, &ctx)?;
    let xb = data.x.select_rows(rows);
    let per_class: Vec<(HyperGrad, DMatrix<f64>)> = (0..engine.n_classes())
        .into_par_iter()
        .map(|c| {
            let prior = &engine.priors.classes[c];
            let q = &engine.posterior.classes[c];
            let h = engine.params.hyper(c);
            let w = &q.a_inv_r;
            let mut k_adj = (prior.k_inv() - q.a_chol.inverse() - w * w.transpose()) * -0.5;
            let mut hg = HyperGrad::zeros(h.dim());
            let mut gz = DMatrix::zeros(prior.m(), h.dim());
            let coef = &terms.classes[c];
            if !rows.is_empty() {
                let (s1, s2, sb) = (&coef.s1 * rho, &coef.s2 * rho, &coef.sb * rho);
                let block = &ctx.proj.classes[c];
                let y = &block.upsilon;
                let p = ctx.stats[c].a_inv_k(&ctx.bases[c]);
                let z = &s1 * ctx.bases[c].w.transpose() + scale_rows(&p, &s2);
                let cross = &z - scale_rows(y, &sb) * 2.0;
                let yz = y.transpose() * &z;
                k_adj += y.transpose() * scale_rows(y, &sb) - (&yz + yz.transpose()) * 0.5;
                contract_cross(&xb, &prior.z, &block.kxz, &cross, h, &mut hg, &mut gz);
                contract_self_variance(sb.sum(), h, &mut hg);
            }
            contract_inducing(&prior.z, &prior.kzz, &k_adj, h, &mut hg, &mut gz);
            (hg, gz)
        })
        .collect();
    let mut grad = GradientVector::zeros(engine.params.layout());
    for (c, (hg, gz)) in per_class.iter().enumerate() {
        grad.add_class(c, hg, gz);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ep::Mode;
    use crate::kernel::KernelHyper;
    use crate::model::GpParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, m: usize, seed: u64) -> (Dataset, GpParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = (0..n).map(|_| rng.random_range(0..3)).collect();
        let data = Dataset::new(x, y, 3).unwrap();
        let h = KernelHyper::new(2, 1.1, 0.9, 0.15);
        let z = (0..3).map(|_| DMatrix::from_fn(m, 2, |_, _| rng.random_range(-2.0..2.0))).collect();
        (data, GpParams::new(vec![h], z).unwrap())
    }

    #[test]
    fn prior_state_has_zero_objective_and_gradient() {
        let (data, params) = toy(10, 3, 1);
        for mode in [Mode::Ep, Mode::Sep] {
            let e = EpEngine::new(&data, params.clone(), mode).unwrap();
            assert_eq!(log_zq(&e, &data).unwrap(), 0.0);
            assert!(grad_log_zq(&e, &data).unwrap().values.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn full_batch_stochastic_gradient_is_the_gradient() {
        let (data, params) = toy(10, 3, 2);
        let mut e = EpEngine::new(&data, params, Mode::Ep).unwrap();
        e.run_to_convergence(&data, 0.5, 1e-8, 200).unwrap();
        let all: Vec<usize> = (0..10).collect();
        assert_eq!(grad_log_zq(&e, &data).unwrap(), stochastic_grad(&e, &data, &all).unwrap());
        assert_eq!(log_zq(&e, &data).unwrap(), log_zq_estimate(&e, &data, &all).unwrap());
    }

    #[test]
    fn single_row_batch_scales_by_n() {
        let (data, params) = toy(10, 3, 3);
        let mut e = EpEngine::new(&data, params, Mode::Ep).unwrap();
        e.run_to_convergence(&data, 0.5, 1e-8, 200).unwrap();
        let prior_only = {
            let mut z = EpEngine::new(&data, e.params.clone(), Mode::Ep).unwrap();
            z.posterior = e.posterior.clone();
            gradient(&z, &data, &[4], 1.0).unwrap()
        };
        let one = gradient(&e, &data, &[4], 1.0).unwrap();
        let scaled = stochastic_grad(&e, &data, &[4]).unwrap();
        for j in 0..one.values.len() {
            let data_part = one.values[j] - prior_only.values[j];
            let expect = prior_only.values[j] + 10.0 * data_part;
            assert!((scaled.values[j] - expect).abs() < 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn gradient_matches_finite_differences_at_convergence() {
        let (data, params) = toy(15, 3, 4);
        let mut e = EpEngine::new(&data, params.clone(), Mode::Ep).unwrap();
        e.run_to_convergence(&data, 0.5, 1e-11, 500).unwrap();
        let g = grad_log_zq(&e, &data).unwrap();
        let flat = params.to_flat();
        for j in 0..flat.len() {
            let step = if params.layout().is_inducing(j) { 1e-4 } else { 1e-5 };
            let eval = |d: f64| {
                let mut f = flat.clone();
                f[j] += d;
                let mut e2 = e.clone();
                e2.set_params(&data, params.from_flat(&f).unwrap()).unwrap();
                log_zq(&e2, &data).unwrap()
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            let rel = (g.values[j] - fd).abs() / g.values[j].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "coordinate {j}: analytic {} vs fd {fd}", g.values[j]);
        }
    }
}
