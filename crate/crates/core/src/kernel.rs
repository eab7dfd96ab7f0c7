//! ARD squared-exponential covariance with amplitude and additive noise.
//!
//! `c(x, x') = s² exp(-½ Σ_d (x_d - x'_d)² / ℓ_d²)`; self covariances of data
//! points additionally carry the noise variance `σ²`. Every hyper-parameter is
//! held in log space.

use crate::error::{Error, Result};
use crate::gaussian::JITTER;
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub log_lengthscale: Vec<f64>,
    pub log_amplitude: f64,
    /// Log of the noise standard deviation σ.
    pub log_noise: f64,
}

/// Index of one kernel hyper-parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperIndex {
    LogLengthscale(usize),
    LogAmplitude,
    LogNoise,
}

/// What a Gram derivative is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramWrt {
    Hyper(HyperIndex),
    /// Coordinate `dim` of row `point` of the right-hand point set.
    RightPoint { point: usize, dim: usize },
    /// Coordinate `dim` of row `point` when both sides are the same point set.
    SharedPoint { point: usize, dim: usize },
}

impl KernelHyper {
    pub fn new(dim: usize, lengthscale: f64, amplitude: f64, noise_std: f64) -> Self {
        Self {
            log_lengthscale: vec![lengthscale.ln(); dim],
            log_amplitude: amplitude.ln(),
            log_noise: noise_std.ln(),
        }
    }

    /// Median-heuristic initialization: every lengthscale is set to the median
    /// Euclidean distance between pairs of a (at most) 1000-point subsample,
    /// amplitude 1 and noise standard deviation 0.1.
    pub fn initial(x: &DMatrix<f64>, seed: u64) -> Self {
        let n = x.nrows();
        let dim = x.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<usize> = if n > 1000 {
            sample(&mut rng, n, 1000).into_vec()
        } else {
            (0..n).collect()
        };
        let mut dists = Vec::with_capacity(rows.len() * rows.len() / 2);
        for (a, &i) in rows.iter().enumerate() {
            for &j in &rows[a + 1..] {
                let d2: f64 = (0..dim).map(|d| (x[(i, d)] - x[(j, d)]).powi(2)).sum();
                dists.push(d2.sqrt());
            }
        }
        let median = if dists.is_empty() {
            1.0
        } else {
            let mid = dists.len() / 2;
            *dists.select_nth_unstable_by(mid, f64::total_cmp).1
        };
        Self::new(dim, median.max(1e-3), 1.0, 0.1)
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscale.len()
    }

    /// Number of scalar hyper-parameters: D lengthscales, amplitude, noise.
    pub fn n_params(&self) -> usize {
        self.dim() + 2
    }

    pub fn amplitude2(&self) -> f64 {
        (2.0 * self.log_amplitude).exp()
    }

    pub fn noise2(&self) -> f64 {
        (2.0 * self.log_noise).exp()
    }

    /// Diagonal jitter of every self Gram: `JITTER · s²`.
    pub fn jitter(&self) -> f64 {
        JITTER * self.amplitude2()
    }

    /// Prior variance κ of a (noisy) data-point latent.
    pub fn self_variance(&self) -> f64 {
        self.amplitude2() + self.jitter() + self.noise2()
    }

    pub fn inv_lengthscale2(&self) -> Vec<f64> {
        self.log_lengthscale.iter().map(|l| (-2.0 * l).exp()).collect()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscale.clone();
        v.push(self.log_amplitude);
        v.push(self.log_noise);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 3 {
            return Err(Error::Dimension("kernel hyper-parameter vector too short".into()));
        }
        let d = v.len() - 2;
        let h = Self {
            log_lengthscale: v[..d].to_vec(),
            log_amplitude: v[d],
            log_noise: v[d + 1],
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.log_lengthscale.iter().all(|v| v.is_finite())
            && self.log_amplitude.is_finite()
            && self.log_noise.is_finite();
        if finite {
            Ok(())
        } else {
            Err(Error::Config("kernel hyper-parameters must be finite".into()))
        }
    }

    fn check_index(&self, idx: HyperIndex) -> Result<()> {
        match idx {
            HyperIndex::LogLengthscale(d) if d >= self.dim() => Err(Error::InvalidIndex(format!(
                "lengthscale {d} out of range for dimension {}",
                self.dim()
            ))),
            _ => Ok(()),
        }
    }
}

/// Covariance between two points (no noise, no jitter).
pub fn cov(h: &KernelHyper, inv_l2: &[f64], a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let r2: f64 = a.zip(b).zip(inv_l2).map(|((x, y), w)| (x - y) * (x - y) * w).sum();
    h.amplitude2() * (-0.5 * r2).exp()
}

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>, h: &KernelHyper) -> Result<()> {
    if a.ncols() != h.dim() || b.ncols() != h.dim() {
        return Err(Error::Dimension(format!(
            "points have {} and {} columns but the kernel has dimension {}",
            a.ncols(),
            b.ncols(),
            h.dim()
        )));
    }
    Ok(())
}

/// `Σ_d (a_id − b_jd)² / ℓ_d²` through one matrix product. With `same` the
/// two sets are the same points and the diagonal is exactly zero.
fn scaled_sq_dist(a: &DMatrix<f64>, b: &DMatrix<f64>, h: &KernelHyper, same: bool) -> DMatrix<f64> {
    let inv_l: Vec<f64> = h.log_lengthscale.iter().map(|l| (-l).exp()).collect();
    let scale = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |i, d| m[(i, d)] * inv_l[d]);
    let (sa, sb) = (scale(a), scale(b));
    let na: Vec<f64> = sa.row_iter().map(|r| r.norm_squared()).collect();
    let nb: Vec<f64> = sb.row_iter().map(|r| r.norm_squared()).collect();
    let mut r2 = &sa * sb.transpose();
    for j in 0..r2.ncols() {
        for i in 0..r2.nrows() {
            r2[(i, j)] = (na[i] + nb[j] - 2.0 * r2[(i, j)]).max(0.0);
        }
    }
    if same {
        r2.fill_diagonal(0.0);
    }
    r2
}

/// Gram matrix between the rows of `a` and `b`. In `self_mode` (which requires
/// `a` and `b` to be the same point set) the diagonal gains `σ² + jitter`.
pub fn gram(a: &DMatrix<f64>, b: &DMatrix<f64>, h: &KernelHyper, self_mode: bool) -> Result<DMatrix<f64>> {
    check_dims(a, b, h)?;
    if self_mode && a.nrows() != b.nrows() {
        return Err(Error::Dimension("self_mode Gram needs a square point set".into()));
    }
    let mut k = scaled_sq_dist(a, b, h, self_mode);
    let amp2 = h.amplitude2();
    k.apply(|r2| *r2 = amp2 * (-0.5 * *r2).exp());
    if self_mode {
        let add = h.noise2() + h.jitter();
        for i in 0..a.nrows() {
            k[(i, i)] += add;
        }
    }
    Ok(k)
}

/// Prior covariance of the inducing values: noise free, jitter on the diagonal.
pub fn inducing_gram(z: &DMatrix<f64>, h: &KernelHyper) -> Result<DMatrix<f64>> {
    check_dims(z, z, h)?;
    let mut k = scaled_sq_dist(z, z, h, true);
    let amp2 = h.amplitude2();
    k.apply(|r2| *r2 = amp2 * (-0.5 * *r2).exp());
    let j = h.jitter();
    for i in 0..z.nrows() {
        k[(i, i)] += j;
    }
    Ok(k)
}

/// Elementwise derivative of [`gram`] (same `self_mode` semantics).
pub fn gram_grad(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    h: &KernelHyper,
    self_mode: bool,
    wrt: GramWrt,
) -> Result<DMatrix<f64>> {
    let k = gram(a, b, h, false)?;
    let inv_l2 = h.inv_lengthscale2();
    let n = a.nrows();
    let m = b.nrows();
    let mut g = DMatrix::zeros(n, m);
    match wrt {
        GramWrt::Hyper(idx) => {
            h.check_index(idx)?;
            match idx {
                HyperIndex::LogLengthscale(d) => {
                    for i in 0..n {
                        for j in 0..m {
                            let diff = a[(i, d)] - b[(j, d)];
                            g[(i, j)] = k[(i, j)] * diff * diff * inv_l2[d];
                        }
                    }
                }
                HyperIndex::LogAmplitude => {
                    g = &k * 2.0;
                    if self_mode {
                        for i in 0..n {
                            g[(i, i)] += 2.0 * h.jitter();
                        }
                    }
                }
                HyperIndex::LogNoise => {
                    if self_mode {
                        for i in 0..n {
                            g[(i, i)] = 2.0 * h.noise2();
                        }
                    }
                }
            }
        }
        GramWrt::RightPoint { point, dim } => {
            if point >= m || dim >= h.dim() {
                return Err(Error::InvalidIndex(format!("point ({point}, {dim})")));
            }
            for i in 0..n {
                g[(i, point)] = k[(i, point)] * (a[(i, dim)] - b[(point, dim)]) * inv_l2[dim];
            }
        }
        GramWrt::SharedPoint { point, dim } => {
            if point >= m || point >= n || dim >= h.dim() {
                return Err(Error::InvalidIndex(format!("point ({point}, {dim})")));
            }
            for l in 0..m {
                if l == point {
                    continue;
                }
                let v = k[(point, l)] * (b[(l, dim)] - a[(point, dim)]) * inv_l2[dim];
                g[(point, l)] = v;
                g[(l, point)] = v;
            }
        }
    }
    Ok(g)
}

/// Gradient accumulator for one kernel's hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrad {
    pub log_lengthscale: Vec<f64>,
    pub log_amplitude: f64,
    pub log_noise: f64,
}

impl HyperGrad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            log_lengthscale: vec![0.0; dim],
            log_amplitude: 0.0,
            log_noise: 0.0,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscale.clone();
        v.push(self.log_amplitude);
        v.push(self.log_noise);
        v
    }
}

/// Accumulate `Σ_ij adj_ij ∂k(x_i, z_j)/∂θ` into `grad` and `grad_z` (M×D),
/// given the cross Gram `kxz`.
pub fn contract_cross(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    kxz: &DMatrix<f64>,
    adj: &DMatrix<f64>,
    h: &KernelHyper,
    grad: &mut HyperGrad,
    grad_z: &mut DMatrix<f64>,
) {
    let w = adj.component_mul(kxz);
    let inv_l2 = h.inv_lengthscale2();
    let row_sums: Vec<f64> = w.row_iter().map(|r| r.sum()).collect();
    let col_sums: Vec<f64> = w.column_iter().map(|c| c.sum()).collect();
    let wz = &w * z; // n × D
    let wtx = w.transpose() * x; // M × D
    for d in 0..h.dim() {
        let mut acc = 0.0;
        for i in 0..x.nrows() {
            let xi = x[(i, d)];
            acc += row_sums[i] * xi * xi - 2.0 * xi * wz[(i, d)];
        }
        for j in 0..z.nrows() {
            acc += col_sums[j] * z[(j, d)] * z[(j, d)];
        }
        grad.log_lengthscale[d] += acc * inv_l2[d];
        for j in 0..z.nrows() {
            grad_z[(j, d)] += (wtx[(j, d)] - col_sums[j] * z[(j, d)]) * inv_l2[d];
        }
    }
    grad.log_amplitude += 2.0 * w.sum();
}

/// Accumulate `tr(adj · ∂K_zz/∂θ)` for the inducing Gram `kzz` (jitter included).
pub fn contract_inducing(
    z: &DMatrix<f64>,
    kzz: &DMatrix<f64>,
    adj: &DMatrix<f64>,
    h: &KernelHyper,
    grad: &mut HyperGrad,
    grad_z: &mut DMatrix<f64>,
) {
    let sym = (adj + adj.transpose()) * 0.5;
    let w = sym.component_mul(kzz);
    let inv_l2 = h.inv_lengthscale2();
    let row_sums: Vec<f64> = w.row_iter().map(|r| r.sum()).collect();
    let wz = &w * z; // M × D
    for d in 0..h.dim() {
        let mut acc = 0.0;
        for j in 0..z.nrows() {
            acc += row_sums[j] * z[(j, d)] * z[(j, d)] - z[(j, d)] * wz[(j, d)];
            grad_z[(j, d)] += 2.0 * (wz[(j, d)] - row_sums[j] * z[(j, d)]) * inv_l2[d];
        }
        grad.log_lengthscale[d] += 2.0 * acc * inv_l2[d];
    }
    grad.log_amplitude += 2.0 * w.sum();
}

/// Accumulate `adj_sum · ∂κ/∂θ` for the data-point self variance κ.
pub fn contract_self_variance(adj_sum: f64, h: &KernelHyper, grad: &mut HyperGrad) {
    grad.log_amplitude += adj_sum * 2.0 * (h.amplitude2() + h.jitter());
    grad.log_noise += adj_sum * 2.0 * h.noise2();
}
