//! Expectation propagation over FITC inducing values.
//!
//! Every (instance `i`, non-true class `k`) pair owns a site with rank-one
//! precision `C1·υυᵀ` and shift `C2·υ` on the blocks of classes `y_i` and `k`.
//! In SEP mode the sites are tied: each class keeps only the accumulated
//! natural parameters of all sites touching it.
//!
//! Posteriors are held through `A = K + G` and `r`, where `G = KΛK` and
//! `r = Kh` are the summed site natural parameters mapped by the prior
//! covariance `K`; then `V = K A⁻¹ K` and `m = K A⁻¹ r`.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gaussian::{cholesky, log_det, rank_one_downdate, symmetrize, MomentGaussian};
use crate::model::GpParams;
use crate::normal::{inv_mills, log_cdf};
use crate::projection::{InducingPrior, Priors, Projections};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::mem::size_of;

/// Full EP (one stored site per pair) or stochastic EP (tied sites).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ep,
    Sep,
}

/// Scalars of one site; all zero is the unit factor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    pub c1_y: f64,
    pub c2_y: f64,
    pub c1_k: f64,
    pub c2_k: f64,
    pub log_s: f64,
}

impl SiteParams {
    pub fn is_unit(&self) -> bool {
        self.c1_y == 0.0 && self.c2_y == 0.0 && self.c1_k == 0.0 && self.c2_k == 0.0
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.c1_y, self.c2_y, self.c1_k, self.c2_k, self.log_s]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self { c1_y: a[0], c2_y: a[1], c1_k: a[2], c2_k: a[3], log_s: a[4] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// `new·ρ + old·(1−ρ)` per parameter.
pub fn damped_store(old: &SiteParams, new: &SiteParams, rho: f64) -> SiteParams {
    let (o, n) = (old.to_array(), new.to_array());
    SiteParams::from_array(std::array::from_fn(|j| n[j] * rho + o[j] * (1.0 - rho)))
}

/// Classes other than `y`, in increasing order.
pub fn other_classes(y: usize, n_classes: usize) -> impl Iterator<Item = usize> {
    (0..n_classes).filter(move |&k| k != y)
}

/// All sites of full EP, stored row-major: instance `i`, then `k ≠ y_i` in
/// increasing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullSites {
    pub n_classes: usize,
    pub sites: Vec<SiteParams>,
}

impl FullSites {
    pub fn zeros(n: usize, n_classes: usize) -> Self {
        Self { n_classes, sites: vec![SiteParams::default(); n * (n_classes - 1)] }
    }

    pub fn n(&self) -> usize {
        self.sites.len() / (self.n_classes - 1)
    }

    pub fn index(&self, i: usize, y: usize, k: usize) -> usize {
        debug_assert_ne!(y, k);
        i * (self.n_classes - 1) + if k < y { k } else { k - 1 }
    }

    pub fn get(&self, i: usize, y: usize, k: usize) -> &SiteParams {
        &self.sites[self.index(i, y, k)]
    }

    pub fn get_mut(&mut self, i: usize, y: usize, k: usize) -> &mut SiteParams {
        let j = self.index(i, y, k);
        &mut self.sites[j]
    }
}

/// Tied SEP factor: per class, the accumulated precision `Λ_c` and shift
/// `h_c` of every site touching the class, and the number `n_c` of such sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiedSite {
    pub precision: Vec<DMatrix<f64>>,
    pub shift: Vec<DVector<f64>>,
    pub counts: Vec<usize>,
    /// False until the first update; an untouched tied factor is the unit
    /// factor and contributes nothing to the objective.
    pub active: bool,
}

impl TiedSite {
    pub fn zeros(m: usize, labels: &[usize], n_classes: usize) -> Self {
        Self {
            precision: vec![DMatrix::zeros(m, m); n_classes],
            shift: vec![DVector::zeros(m); n_classes],
            counts: factor_counts(labels, n_classes),
            active: false,
        }
    }
}

/// `n_c = N_c (C−1) + (N − N_c)`: sites whose factor touches class `c`.
pub fn factor_counts(labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut per_class = vec![0usize; n_classes];
    for &y in labels {
        per_class[y] += 1;
    }
    let n = labels.len();
    per_class.iter().map(|&nc| nc * (n_classes - 1) + (n - nc)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SiteState {
    Full(FullSites),
    Tied(TiedSite),
}

impl SiteState {
    pub fn mode(&self) -> Mode {
        match self {
            SiteState::Full(_) => Mode::Ep,
            SiteState::Tied(_) => Mode::Sep,
        }
    }
}

/// Posterior over one class's inducing values.
#[derive(Debug, Clone)]
pub struct ClassPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Factor of `A = K + G`.
    pub a_chol: Cholesky<f64, Dyn>,
    pub r: DVector<f64>,
    /// `A⁻¹ r` (equivalently `K⁻¹ m`).
    pub a_inv_r: DVector<f64>,
    pub log_det_a: f64,
}

impl ClassPosterior {
    pub fn build(prior: &InducingPrior, g: &DMatrix<f64>, r: DVector<f64>, class: usize) -> Result<Self> {
        let mut a = &prior.kzz + g;
        symmetrize(&mut a);
        let a_chol = cholesky(&a, "posterior").map_err(|_| Error::Reconstruction { class })?;
        let w = a_chol
            .l_dirty()
            .solve_lower_triangular(&prior.kzz)
            .ok_or(Error::Reconstruction { class })?;
        let mut cov = w.transpose() * &w;
        symmetrize(&mut cov);
        let a_inv_r = a_chol.solve(&r);
        let mean = &prior.kzz * &a_inv_r;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Reconstruction { class });
        }
        let log_det_a = log_det(&a_chol);
        Ok(Self { mean, cov, a_chol, r, a_inv_r, log_det_a })
    }

    pub fn prior(prior: &InducingPrior) -> Self {
        let m = prior.m();
        Self {
            mean: DVector::zeros(m),
            cov: prior.kzz.clone(),
            a_chol: prior.chol.clone(),
            r: DVector::zeros(m),
            a_inv_r: DVector::zeros(m),
            log_det_a: prior.log_det,
        }
    }

    pub fn moments(&self) -> MomentGaussian {
        MomentGaussian { mean: self.mean.clone(), cov: self.cov.clone() }
    }

    /// `g(θ) − g(θ_prior) = ½(log|K| − log|A| + rᵀA⁻¹r)`.
    pub fn log_normalizer_gain(&self, prior: &InducingPrior) -> f64 {
        0.5 * (prior.log_det - self.log_det_a + self.r.dot(&self.a_inv_r))
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorState {
    pub classes: Vec<ClassPosterior>,
}

/// Unit sites and the prior as posterior.
pub fn init_state(priors: &Priors, labels: &[usize], mode: Mode) -> (SiteState, PosteriorState) {
    let c = priors.n_classes();
    let sites = match mode {
        Mode::Ep => SiteState::Full(FullSites::zeros(labels.len(), c)),
        Mode::Sep => SiteState::Tied(TiedSite::zeros(priors.classes[0].m(), labels, c)),
    };
    let posterior = PosteriorState { classes: priors.classes.iter().map(ClassPosterior::prior).collect() };
    (sites, posterior)
}

/// Per-instance site precisions `Δ` and shifts `μ̃` on class `c`'s block.
fn class_site_sums(sites: &FullSites, labels: &[usize], c: usize) -> (DVector<f64>, DVector<f64>) {
    let n = labels.len();
    let mut delta = DVector::zeros(n);
    let mut mu = DVector::zeros(n);
    for (i, &y) in labels.iter().enumerate() {
        if y == c {
            for k in other_classes(y, sites.n_classes) {
                let s = sites.get(i, y, k);
                delta[i] += s.c1_y;
                mu[i] += s.c2_y;
            }
        } else {
            let s = sites.get(i, y, c);
            delta[i] = s.c1_k;
            mu[i] = s.c2_k;
        }
    }
    (delta, mu)
}

/// Rebuild `q` from the sites. Full EP needs the projections of every
/// training row (`proj.rows == 0..N`).
pub fn reconstruct_posterior(
    sites: &SiteState,
    priors: &Priors,
    labels: &[usize],
    proj: Option<&Projections>,
) -> Result<PosteriorState> {
    let classes = (0..priors.n_classes())
        .into_par_iter()
        .map(|c| {
            let prior = &priors.classes[c];
            let (g, r) = match sites {
                SiteState::Full(full) => {
                    let proj = proj.ok_or_else(|| Error::Config("full EP reconstruction needs projections".into()))?;
                    if proj.len() != labels.len() {
                        return Err(Error::Dimension("projections do not cover the training set".into()));
                    }
                    let (delta, mu) = class_site_sums(full, labels, c);
                    let kxz = &proj.classes[c].kxz;
                    let scaled = DMatrix::from_fn(kxz.nrows(), kxz.ncols(), |i, j| kxz[(i, j)] * delta[i]);
                    (kxz.transpose() * scaled, kxz.transpose() * mu)
                }
                SiteState::Tied(t) => {
                    let k = &prior.kzz;
                    (k * &t.precision[c] * k, k * &t.shift[c])
                }
            };
            ClassPosterior::build(prior, &g, r, c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorState { classes })
}

/// Cavity (or posterior) marginal of `f = υᵀu + N(0, s)` on one class block,
/// plus the posterior quantities it was derived from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockCavity {
    /// Cavity mean along `υ`.
    pub a: f64,
    /// Cavity variance along `υ`, `υᵀV\υ`.
    pub vc: f64,
    /// FITC conditional variance.
    pub s: f64,
    /// Base-posterior mean and variance along `υ`.
    pub mm: f64,
    pub vv: f64,
    /// `1 − C1·vv`.
    pub den: f64,
}

impl BlockCavity {
    /// Remove a site block `(c1, c2)` from base quantities `vv = υᵀVυ`,
    /// `mm = υᵀm` by the rank-one Woodbury identity.
    pub fn remove(vv: f64, mm: f64, s: f64, c1: f64, c2: f64) -> Result<Self> {
        let den = 1.0 - c1 * vv;
        if !(den > 0.0) || !den.is_finite() {
            return Err(Error::CavityInvalid);
        }
        Ok(Self { a: (mm - c2 * vv) / den, vc: vv / den, s, mm, vv, den })
    }

    pub fn b(&self) -> f64 {
        self.s + self.vc
    }

    /// `g(θ\) − g(θ)` on this block for a site `(c1, c2)`.
    pub fn log_normalizer_drop(&self, c1: f64, c2: f64) -> f64 {
        let (mm, vv, den) = (self.mm, self.vv, self.den);
        -0.5 * den.ln() - 0.5 * (2.0 * c2 * mm - c2 * c2 * vv - c1 * mm * mm) / den
    }
}

/// Projected cavities of one site on the blocks of `y_i` and `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteCavity {
    pub y: BlockCavity,
    pub k: BlockCavity,
}

/// Lower clamp on `β² + βα̂`.
const NU_FLOOR: f64 = 1e-12;

/// Probit quantities of a site's tilted distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tilted {
    pub alpha: f64,
    pub log_z: f64,
    pub beta: f64,
    /// `b_y + b_k`.
    pub total_var: f64,
}

impl Tilted {
    pub fn new(cav: &SiteCavity) -> Result<Self> {
        let total_var = cav.y.b() + cav.k.b();
        if !(total_var > 0.0) || !total_var.is_finite() {
            return Err(Error::CavityInvalid);
        }
        let alpha = (cav.y.a - cav.k.a) / total_var.sqrt();
        Ok(Self { alpha, log_z: log_cdf(alpha), beta: inv_mills(alpha), total_var })
    }

    /// `(β² + βα̂)/B`, clamped to keep the variance reduction in `(0, 1)`.
    pub fn nu(&self) -> f64 {
        let t = (self.beta * self.beta + self.beta * self.alpha).clamp(NU_FLOOR, 1.0 - NU_FLOOR);
        t / self.total_var
    }

    /// `∂ log Z / ∂a_y` (the `k` block has the opposite sign).
    pub fn d_mean(&self) -> f64 {
        self.beta / self.total_var.sqrt()
    }

    /// `∂ log Z / ∂b` for either block.
    pub fn d_var(&self) -> f64 {
        -0.5 * self.beta * self.alpha / self.total_var
    }
}

/// `g(θ) − g(θ\)` for one block after multiplying the cavity `(a, vc)` by a
/// site `(c1, c2)`.
fn block_gain(c1: f64, c2: f64, a: f64, vc: f64) -> f64 {
    let q = 1.0 + c1 * vc;
    -0.5 * q.ln() + 0.5 * (2.0 * c2 * a + c2 * c2 * vc - c1 * (a + c2 * vc).powi(2) / q)
}

/// Moment-matched site for the given projected cavities, and `log Z_{i,k}`.
pub fn tilted_update(cav: &SiteCavity) -> Result<(SiteParams, f64)> {
    let t = Tilted::new(cav)?;
    let nu = t.nu();
    let g = t.d_mean();
    let c1_y = nu / (1.0 - nu * cav.y.vc);
    let c1_k = nu / (1.0 - nu * cav.k.vc);
    let c2_y = g * (1.0 + c1_y * cav.y.vc) + c1_y * cav.y.a;
    let c2_k = -g * (1.0 + c1_k * cav.k.vc) + c1_k * cav.k.a;
    let log_s = t.log_z - block_gain(c1_y, c2_y, cav.y.a, cav.y.vc) - block_gain(c1_k, c2_k, cav.k.a, cav.k.vc);
    let site = SiteParams { c1_y, c2_y, c1_k, c2_k, log_s };
    if !site.is_finite() {
        return Err(Error::CavityInvalid);
    }
    Ok((site, t.log_z))
}

/// Base distribution the cavities are taken from, for one class: `A_base` and
/// `A_base⁻¹ r_base`. Full EP uses `q` itself and removes each site by a
/// rank-one downdate; SEP uses the shared cavity `q / φ̃_c^{1/n_c}`.
#[derive(Debug, Clone)]
pub struct ClassBase {
    pub chol: Cholesky<f64, Dyn>,
    pub w: DVector<f64>,
    pub log_det: f64,
    pub r: DVector<f64>,
}

/// Per-row base quantities of a batch on one class.
#[derive(Debug, Clone)]
pub struct BlockStats {
    /// `kᵀ A_base⁻¹ k` per row.
    pub vv: DVector<f64>,
    /// `kᵀ A_base⁻¹ r_base` per row.
    pub mm: DVector<f64>,
    /// `L⁻¹ Kxzᵀ` (`M × n`) with `L` the factor of `A_base`.
    pub solved: DMatrix<f64>,
}

impl BlockStats {
    pub fn compute(base: &ClassBase, kxz: &DMatrix<f64>) -> Self {
        let solved = base
            .chol
            .l_dirty()
            .solve_lower_triangular(&kxz.transpose())
            .expect("Cholesky factor has a positive diagonal");
        let vv = DVector::from_iterator(solved.ncols(), solved.column_iter().map(|c| c.norm_squared()));
        let mm = kxz * &base.w;
        Self { vv, mm, solved }
    }

    /// Rows of `A_base⁻¹ Kxzᵀ`, as an `n × M` matrix.
    pub fn a_inv_k(&self, base: &ClassBase) -> DMatrix<f64> {
        base.chol
            .l_dirty()
            .tr_solve_lower_triangular(&self.solved)
            .expect("Cholesky factor has a positive diagonal")
            .transpose()
    }
}

/// Everything a sweep over a batch of rows needs.
#[derive(Debug, Clone)]
pub struct BatchContext {
    pub proj: Projections,
    pub bases: Vec<ClassBase>,
    pub stats: Vec<BlockStats>,
}

/// Outcome of one parallel pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PassStats {
    /// Σ log Z_{i,k} over the updated sites.
    pub log_z_sum: f64,
    pub updated: usize,
    pub skipped: usize,
    /// Largest absolute change of any stored site quantity.
    pub max_change: f64,
    /// Damping actually used (after any halving).
    pub rho: f64,
}

impl PassStats {
    pub fn skip_fraction(&self) -> f64 {
        let total = self.updated + self.skipped;
        if total == 0 {
            0.0
        } else {
            self.skipped as f64 / total as f64
        }
    }
}

/// Result of running passes until the sites stop moving.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    pub passes: usize,
    pub converged: bool,
    pub last: PassStats,
}

/// Halvings of the damping attempted before a failed pass is reported.
const MAX_HALVINGS: usize = 10;

/// The EP state machine: parameters, priors, sites and posterior.
#[derive(Debug, Clone)]
pub struct EpEngine {
    pub params: GpParams,
    pub priors: Priors,
    pub sites: SiteState,
    pub posterior: PosteriorState,
    /// Projections of all training rows (full EP only).
    cache: Option<Projections>,
}

impl EpEngine {
    pub fn new(data: &Dataset, params: GpParams, mode: Mode) -> Result<Self> {
        Self::check_data(data, &params)?;
        let priors = Priors::new(&params)?;
        let (sites, posterior) = init_state(&priors, &data.y, mode);
        let cache = Self::build_cache(data, &priors, mode)?;
        Ok(Self { params, priors, sites, posterior, cache })
    }

    /// Engine with the given sites; the posterior is reconstructed from them.
    pub fn with_sites(data: &Dataset, params: GpParams, sites: SiteState) -> Result<Self> {
        Self::check_data(data, &params)?;
        let priors = Priors::new(&params)?;
        match &sites {
            SiteState::Full(f) if f.n() != data.len() || f.n_classes != data.n_classes => {
                return Err(Error::Dimension("site table does not match the dataset".into()))
            }
            SiteState::Tied(t) if t.counts.len() != data.n_classes => {
                return Err(Error::Dimension("tied factor does not match the class count".into()))
            }
            _ => {}
        }
        let cache = Self::build_cache(data, &priors, sites.mode())?;
        let posterior = reconstruct_posterior(&sites, &priors, &data.y, cache.as_ref())?;
        Ok(Self { params, priors, sites, posterior, cache })
    }

    fn check_data(data: &Dataset, params: &GpParams) -> Result<()> {
        if data.n_classes != params.n_classes() {
            return Err(Error::Dimension(format!(
                "dataset has {} classes, parameters {}",
                data.n_classes,
                params.n_classes()
            )));
        }
        if data.dim() != params.dim() {
            return Err(Error::Dimension(format!(
                "dataset has {} features, parameters {}",
                data.dim(),
                params.dim()
            )));
        }
        Ok(())
    }

    fn build_cache(data: &Dataset, priors: &Priors, mode: Mode) -> Result<Option<Projections>> {
        match mode {
            Mode::Ep => {
                let all: Vec<usize> = (0..data.len()).collect();
                Ok(Some(Projections::compute(&data.x, &all, priors)?))
            }
            Mode::Sep => Ok(None),
        }
    }

    pub fn mode(&self) -> Mode {
        self.sites.mode()
    }

    pub fn n_classes(&self) -> usize {
        self.priors.n_classes()
    }

    /// Swap in new parameters, keeping the sites. On failure the engine is
    /// left unchanged.
    pub fn set_params(&mut self, data: &Dataset, params: GpParams) -> Result<()> {
        Self::check_data(data, &params)?;
        let priors = Priors::new(&params)?;
        let cache = Self::build_cache(data, &priors, self.mode())?;
        let posterior = reconstruct_posterior(&self.sites, &priors, &data.y, cache.as_ref())?;
        self.params = params;
        self.priors = priors;
        self.cache = cache;
        self.posterior = posterior;
        Ok(())
    }

    pub fn reconstruct(&mut self, data: &Dataset) -> Result<()> {
        self.posterior = reconstruct_posterior(&self.sites, &self.priors, &data.y, self.cache.as_ref())?;
        Ok(())
    }

    /// Projections of `rows`, taken from the cache when available.
    pub fn projections(&self, data: &Dataset, rows: &[usize]) -> Result<Projections> {
        if let Some(&bad) = rows.iter().find(|&&i| i >= data.len()) {
            return Err(Error::InvalidIndex(format!("row {bad} out of range for {} instances", data.len())));
        }
        match &self.cache {
            Some(cache) => Ok(Projections {
                rows: rows.to_vec(),
                classes: cache
                    .classes
                    .iter()
                    .map(|b| crate::projection::ProjectionBlock {
                        kxz: b.kxz.select_rows(rows),
                        upsilon: b.upsilon.select_rows(rows),
                        s: DVector::from_iterator(rows.len(), rows.iter().map(|&i| b.s[i])),
                    })
                    .collect(),
            }),
            None => Projections::compute(&data.x, rows, &self.priors),
        }
    }

    /// The distribution cavities are taken from, per class.
    pub fn bases(&self) -> Result<Vec<ClassBase>> {
        (0..self.n_classes())
            .into_par_iter()
            .map(|c| {
                let q = &self.posterior.classes[c];
                match &self.sites {
                    SiteState::Full(_) => Ok(ClassBase {
                        chol: q.a_chol.clone(),
                        w: q.a_inv_r.clone(),
                        log_det: q.log_det_a,
                        r: q.r.clone(),
                    }),
                    SiteState::Tied(t) => {
                        // A' = K + (1 − 1/n_c) KΛK, r' = (1 − 1/n_c) r.
                        let keep = 1.0 - 1.0 / t.counts[c].max(1) as f64;
                        let k = &self.priors.classes[c].kzz;
                        let mut ab = k + k * &t.precision[c] * k * keep;
                        symmetrize(&mut ab);
                        let chol = cholesky(&ab, "cavity").map_err(|_| Error::CavityInvalid)?;
                        let r = &q.r * keep;
                        let w = chol.solve(&r);
                        let log_det = log_det(&chol);
                        Ok(ClassBase { chol, w, log_det, r })
                    }
                }
            })
            .collect()
    }

    pub fn batch_context(&self, data: &Dataset, rows: &[usize]) -> Result<BatchContext> {
        let proj = self.projections(data, rows)?;
        let bases = self.bases()?;
        let stats = bases
            .par_iter()
            .zip(proj.classes.par_iter())
            .map(|(b, p)| BlockStats::compute(b, &p.kxz))
            .collect();
        Ok(BatchContext { proj, bases, stats })
    }

    /// Site quantities removed when forming the cavity of pair `(i, k)`:
    /// `(c1_y, c2_y, c1_k, c2_k)`; zero under SEP, where the removal is
    /// already part of the base.
    pub fn removal(&self, i: usize, y: usize, k: usize) -> SiteParams {
        match &self.sites {
            SiteState::Full(f) => *f.get(i, y, k),
            SiteState::Tied(_) => SiteParams::default(),
        }
    }

    /// Projected cavity of pair `(row, k)` where `t` is the row's position in
    /// `ctx`.
    pub fn site_cavity(&self, ctx: &BatchContext, t: usize, y: usize, k: usize) -> Result<SiteCavity> {
        let i = ctx.proj.rows[t];
        let old = self.removal(i, y, k);
        let (sy, sk) = (&ctx.stats[y], &ctx.stats[k]);
        Ok(SiteCavity {
            y: BlockCavity::remove(sy.vv[t], sy.mm[t], ctx.proj.classes[y].s[t], old.c1_y, old.c2_y)?,
            k: BlockCavity::remove(sk.vv[t], sk.mm[t], ctx.proj.classes[k].s[t], old.c1_k, old.c2_k)?,
        })
    }

    /// Whether sites currently carry information (else the objective has no
    /// data terms).
    pub fn site_active(&self, i: usize, y: usize, k: usize) -> bool {
        match &self.sites {
            SiteState::Full(f) => !f.get(i, y, k).is_unit(),
            SiteState::Tied(t) => t.active,
        }
    }

    /// Full cavity marginals of pair `(i, k)` on the blocks of `y_i` and `k`.
    pub fn compute_cavity(&self, data: &Dataset, i: usize, k: usize) -> Result<(MomentGaussian, MomentGaussian)> {
        let y = data.y[i];
        if k == y || k >= self.n_classes() {
            return Err(Error::InvalidIndex(format!("class {k} is not a non-true class of instance {i}")));
        }
        let proj = self.projections(data, &[i])?;
        let old = self.removal(i, y, k);
        let block = |c: usize, c1: f64, c2: f64| -> Result<MomentGaussian> {
            let q = &self.posterior.classes[c];
            match &self.sites {
                SiteState::Full(_) => {
                    let u = proj.classes[c].upsilon.row(0).transpose();
                    let cov = rank_one_downdate(&q.cov, &u, c1)?;
                    let vu = &q.cov * &u;
                    let den = 1.0 - c1 * u.dot(&vu);
                    let mean = &q.mean + vu * ((c1 * u.dot(&q.mean) - c2) / den);
                    Ok(MomentGaussian { mean, cov })
                }
                SiteState::Tied(_) => {
                    let base = &self.bases()?[c];
                    let k = &self.priors.classes[c].kzz;
                    let w = base.chol.l_dirty().solve_lower_triangular(k).ok_or(Error::CavityInvalid)?;
                    let mut cov = w.transpose() * w;
                    symmetrize(&mut cov);
                    Ok(MomentGaussian { mean: k * &base.w, cov })
                }
            }
        };
        Ok((block(y, old.c1_y, old.c2_y)?, block(k, old.c1_k, old.c2_k)?))
    }

    /// One parallel EP pass over `batch`: every pair is updated from the same
    /// pre-pass `q`, then `q` is reconstructed once. Cavities that are not
    /// positive definite are skipped. A failed reconstruction restores the
    /// previous sites and is returned as an error.
    pub fn pass(&mut self, data: &Dataset, batch: &[usize], rho: f64) -> Result<PassStats> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("damping {rho} outside [0, 1]")));
        }
        let mut stats = PassStats { rho, ..Default::default() };
        if batch.is_empty() {
            return Ok(stats);
        }
        let ctx = self.batch_context(data, batch)?;
        let c = self.n_classes();
        let updates: Vec<Vec<(usize, Result<(SiteParams, f64)>)>> = (0..batch.len())
            .into_par_iter()
            .map(|t| {
                let y = data.y[batch[t]];
                other_classes(y, c)
                    .map(|k| (k, self.site_cavity(&ctx, t, y, k).and_then(|cav| tilted_update(&cav))))
                    .collect()
            })
            .collect();
        for row in &updates {
            for (_, u) in row {
                match u {
                    Ok((_, lz)) => {
                        stats.updated += 1;
                        stats.log_z_sum += lz;
                    }
                    Err(Error::CavityInvalid) => stats.skipped += 1,
                    Err(e) => return Err(Error::Config(format!("site update failed: {e}"))),
                }
            }
        }
        let previous = self.sites.clone();
        match &mut self.sites {
            SiteState::Full(full) => {
                for (t, row) in updates.iter().enumerate() {
                    let i = batch[t];
                    let y = data.y[i];
                    for (k, u) in row {
                        if let Ok((new, _)) = u {
                            let slot = full.get_mut(i, y, *k);
                            let next = damped_store(slot, new, rho);
                            for (a, b) in slot.to_array().iter().zip(next.to_array()) {
                                stats.max_change = stats.max_change.max((a - b).abs());
                            }
                            *slot = next;
                        }
                    }
                }
            }
            SiteState::Tied(tied) => {
                // Λ_c ← Λ_c + ρ Σ (fresh site − Λ_c / n_c) over processed pairs.
                for cls in 0..c {
                    let block = &ctx.proj.classes[cls];
                    let mut d = DVector::<f64>::zeros(batch.len());
                    let mut e = DVector::<f64>::zeros(batch.len());
                    let mut touched = 0usize;
                    for (t, row) in updates.iter().enumerate() {
                        let y = data.y[batch[t]];
                        for (k, u) in row {
                            if let Ok((s, _)) = u {
                                if cls == y {
                                    d[t] += s.c1_y;
                                    e[t] += s.c2_y;
                                    touched += 1;
                                } else if cls == *k {
                                    d[t] += s.c1_k;
                                    e[t] += s.c2_k;
                                    touched += 1;
                                }
                            }
                        }
                    }
                    let ups = &block.upsilon;
                    let scaled = DMatrix::from_fn(ups.nrows(), ups.ncols(), |i, j| ups[(i, j)] * d[i]);
                    let fresh_prec = ups.transpose() * scaled;
                    let fresh_shift = ups.transpose() * e;
                    let frac = touched as f64 / tied.counts[cls].max(1) as f64;
                    let delta_prec = (fresh_prec - &tied.precision[cls] * frac) * rho;
                    let delta_shift = (fresh_shift - &tied.shift[cls] * frac) * rho;
                    stats.max_change = stats.max_change.max(delta_prec.amax()).max(delta_shift.amax());
                    tied.precision[cls] += delta_prec;
                    symmetrize(&mut tied.precision[cls]);
                    tied.shift[cls] += delta_shift;
                }
                tied.active = true;
            }
        }
        match reconstruct_posterior(&self.sites, &self.priors, &data.y, self.cache.as_ref()) {
            Ok(p) => {
                self.posterior = p;
                Ok(stats)
            }
            Err(e) => {
                self.sites = previous;
                Err(e)
            }
        }
    }

    /// [`pass`](Self::pass), halving the damping after each failed
    /// reconstruction.
    pub fn pass_with_retry(&mut self, data: &Dataset, batch: &[usize], rho: f64) -> Result<PassStats> {
        let mut rho = rho;
        let mut last_err = None;
        for _ in 0..=MAX_HALVINGS {
            match self.pass(data, batch, rho) {
                Ok(s) => return Ok(s),
                Err(e @ Error::Reconstruction { .. }) => {
                    last_err = Some(e);
                    rho *= 0.5;
                }
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    /// Full-batch passes until the largest site change drops below `tol`.
    pub fn run_to_convergence(&mut self, data: &Dataset, rho: f64, tol: f64, max_passes: usize) -> Result<Convergence> {
        let all: Vec<usize> = (0..data.len()).collect();
        let mut last = PassStats::default();
        for pass in 1..=max_passes {
            last = self.pass_with_retry(data, &all, rho)?;
            if last.max_change < tol {
                return Ok(Convergence { passes: pass, converged: true, last });
            }
        }
        Ok(Convergence { passes: max_passes, converged: max_passes == 0, last })
    }

    /// Bytes held by the inference state: sites (or tied factor), posterior
    /// and, for full EP, the projection cache. Independent of `N` under SEP.
    pub fn memory_bytes(&self) -> usize {
        let f = size_of::<f64>();
        let mat = |m: &DMatrix<f64>| m.len() * f;
        let vec = |v: &DVector<f64>| v.len() * f;
        let sites = match &self.sites {
            SiteState::Full(s) => s.sites.len() * size_of::<SiteParams>(),
            SiteState::Tied(t) => {
                t.precision.iter().map(mat).sum::<usize>()
                    + t.shift.iter().map(vec).sum::<usize>()
                    + t.counts.len() * size_of::<usize>()
            }
        };
        let post: usize = self
            .posterior
            .classes
            .iter()
            .map(|q| vec(&q.mean) + mat(&q.cov) + mat(q.a_chol.l_dirty()) + vec(&q.r) + vec(&q.a_inv_r))
            .sum();
        let priors: usize = self.priors.classes.iter().map(|p| mat(&p.z) + mat(&p.kzz) + mat(p.chol.l_dirty())).sum();
        let cache = self.cache.as_ref().map_or(0, |c| {
            c.classes.iter().map(|b| mat(&b.kxz) + mat(&b.upsilon) + vec(&b.s)).sum::<usize>()
                + c.rows.len() * size_of::<usize>()
        });
        sites + post + priors + cache
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelHyper;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, m: usize, seed: u64) -> (Dataset, GpParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = (0..n).map(|i| i % 3).collect();
        let data = Dataset::new(x, y, 3).unwrap();
        let h = KernelHyper::new(2, 1.0, 1.0, 0.1);
        let z: Vec<DMatrix<f64>> = (0..3).map(|_| DMatrix::from_fn(m, 2, |_, _| rng.random_range(-2.0..2.0))).collect();
        (data, GpParams::new(vec![h], z).unwrap())
    }

    fn cav(ay: f64, vy: f64, sy: f64, ak: f64, vk: f64, sk: f64) -> SiteCavity {
        SiteCavity {
            y: BlockCavity::remove(vy, ay, sy, 0.0, 0.0).unwrap(),
            k: BlockCavity::remove(vk, ak, sk, 0.0, 0.0).unwrap(),
        }
    }

    #[test]
    fn damping_is_a_convex_combination() {
        let old = SiteParams { c1_y: 0.0, ..Default::default() };
        let new = SiteParams { c1_y: 2.0, c2_k: -1.0, ..Default::default() };
        assert_eq!(damped_store(&old, &new, 1.0), new);
        assert_eq!(damped_store(&old, &new, 0.0), old);
        assert_eq!(damped_store(&old, &new, 0.5).c1_y, 1.0);
    }

    #[test]
    fn symmetric_probit() {
        let t = Tilted::new(&cav(0.3, 0.5, 0.1, 0.3, 0.7, 0.2)).unwrap();
        assert!((t.log_z.exp() - 0.5).abs() < 1e-15);
        assert!((t.beta - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn updated_site_matches_tilted_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let c = cav(
                rng.random_range(-2.0..2.0),
                rng.random_range(0.05..2.0),
                rng.random_range(0.01..0.5),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.05..2.0),
                rng.random_range(0.01..0.5),
            );
            let (s, log_z) = tilted_update(&c).unwrap();
            let t = Tilted::new(&c).unwrap();
            assert_eq!(log_z, t.log_z);
            for (blk, c1, c2, sign) in [(c.y, s.c1_y, s.c2_y, 1.0), (c.k, s.c1_k, s.c2_k, -1.0)] {
                let var_q = blk.vc / (1.0 + c1 * blk.vc);
                let mean_q = (blk.a + c2 * blk.vc) / (1.0 + c1 * blk.vc);
                let mean_t = blk.a + sign * blk.vc * t.d_mean();
                let var_t = blk.vc - blk.vc * blk.vc * t.nu();
                assert!((mean_q - mean_t).abs() < 1e-10 * (1.0 + mean_t.abs()));
                assert!((var_q - var_t).abs() < 1e-10 * var_t);
                assert!(c1 > 0.0);
            }
        }
    }

    #[test]
    fn cavity_removal_inverts_the_site() {
        // Posterior along υ from cavity (a, vc) and site (c1, c2), then removed.
        let (a, vc, c1, c2) = (0.4, 0.8, 1.3, -0.2);
        let vv = vc / (1.0 + c1 * vc);
        let mm = (a + c2 * vc) / (1.0 + c1 * vc);
        let b = BlockCavity::remove(vv, mm, 0.1, c1, c2).unwrap();
        assert!((b.a - a).abs() < 1e-14 && (b.vc - vc).abs() < 1e-14);
        assert!((b.log_normalizer_drop(c1, c2) + block_gain(c1, c2, a, vc)).abs() < 1e-13);
        assert!(matches!(BlockCavity::remove(1.0, 0.0, 0.1, 1.0, 0.0), Err(Error::CavityInvalid)));
    }

    #[test]
    fn init_is_the_prior_and_empty_pass_is_a_no_op() {
        let (data, params) = toy(9, 3, 1);
        for mode in [Mode::Ep, Mode::Sep] {
            let mut e = EpEngine::new(&data, params.clone(), mode).unwrap();
            for (q, p) in e.posterior.classes.iter().zip(&e.priors.classes) {
                assert_eq!(q.cov, p.kzz);
                assert_eq!(q.mean.amax(), 0.0);
            }
            let before = e.posterior.classes[0].cov.clone();
            let s = e.pass(&data, &[], 0.5).unwrap();
            assert_eq!(s.updated, 0);
            assert_eq!(e.posterior.classes[0].cov, before);
        }
    }

    #[test]
    fn small_problem_converges() {
        let (data, params) = toy(5, 2, 2);
        let mut e = EpEngine::new(&data, params, Mode::Ep).unwrap();
        let conv = e.run_to_convergence(&data, 1.0, 1e-6, 200).unwrap();
        assert!(conv.converged, "{conv:?}");
        assert_eq!(conv.last.skipped, 0);
    }

    #[test]
    fn factor_counts_per_class() {
        assert_eq!(factor_counts(&[0, 0, 1, 2], 3), vec![2 * 2 + 2, 2 + 3, 2 + 3]);
    }

    #[test]
    fn sep_memory_is_independent_of_n() {
        let (small, p) = toy(30, 4, 3);
        let (large, _) = toy(300, 4, 3);
        let a = EpEngine::new(&small, p.clone(), Mode::Sep).unwrap();
        let b = EpEngine::new(&large, p.clone(), Mode::Sep).unwrap();
        assert_eq!(a.memory_bytes(), b.memory_bytes());
        let c = EpEngine::new(&large, p, Mode::Ep).unwrap();
        assert!(c.memory_bytes() > 3 * b.memory_bytes());
    }
}
