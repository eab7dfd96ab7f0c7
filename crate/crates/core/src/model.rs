//! Learnable parameters: kernel hyper-parameters (tied or per class) and
//! per-class inducing inputs, with a flat-vector layout for optimizers.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{HyperGrad, KernelHyper};
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpParams {
    /// One entry when tied, otherwise one per class.
    pub hypers: Vec<KernelHyper>,
    /// Per-class inducing inputs, each `M × D`.
    pub inducing: Vec<DMatrix<f64>>,
}

impl GpParams {
    pub fn new(hypers: Vec<KernelHyper>, inducing: Vec<DMatrix<f64>>) -> Result<Self> {
        let p = Self { hypers, inducing };
        p.validate()?;
        Ok(p)
    }

    /// Median-heuristic hypers and `m` inducing inputs per class drawn at
    /// random (independently per class) from the training inputs.
    pub fn initial(data: &Dataset, m: usize, tied: bool, seed: u64) -> Result<Self> {
        if m == 0 || m > data.len() {
            return Err(Error::Config(format!(
                "number of inducing points ({m}) must be in 1..={}",
                data.len()
            )));
        }
        let h = KernelHyper::initial(&data.x, seed);
        let hypers = if tied { vec![h] } else { vec![h; data.n_classes] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let inducing = (0..data.n_classes)
            .map(|_| {
                let mut rows = sample(&mut rng, data.len(), m).into_vec();
                rows.sort_unstable();
                data.x.select_rows(&rows)
            })
            .collect();
        Self::new(hypers, inducing)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.inducing.len();
        if c < 2 {
            return Err(Error::Config("need inducing inputs for at least two classes".into()));
        }
        if self.hypers.len() != 1 && self.hypers.len() != c {
            return Err(Error::Config(format!(
                "{} kernel blocks for {c} classes (expected 1 or {c})",
                self.hypers.len()
            )));
        }
        let (m, d) = self.inducing[0].shape();
        for z in &self.inducing {
            if z.shape() != (m, d) {
                return Err(Error::Dimension("inducing sets must share a shape".into()));
            }
        }
        for h in &self.hypers {
            h.validate()?;
            if h.dim() != d {
                return Err(Error::Dimension(format!(
                    "kernel dimension {} but inducing inputs have {d} columns",
                    h.dim()
                )));
            }
        }
        if self.inducing.iter().any(|z| z.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config("inducing inputs must be finite".into()));
        }
        Ok(())
    }

    pub fn tied(&self) -> bool {
        self.hypers.len() == 1
    }

    pub fn n_classes(&self) -> usize {
        self.inducing.len()
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.inducing[0].ncols()
    }

    pub fn hyper(&self, class: usize) -> &KernelHyper {
        if self.tied() {
            &self.hypers[0]
        } else {
            &self.hypers[class]
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            n_classes: self.n_classes(),
            n_kernels: self.hypers.len(),
            dim: self.dim(),
            n_inducing: self.n_inducing(),
        }
    }

    /// Kernel blocks first (log lengthscales, log amplitude, log noise), then
    /// each class's inducing inputs row by row.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.layout().len());
        for h in &self.hypers {
            v.extend(h.to_vec());
        }
        for z in &self.inducing {
            for r in z.row_iter() {
                v.extend(r.iter());
            }
        }
        v
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        let layout = self.layout();
        if flat.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "parameter vector has length {}, expected {}",
                flat.len(),
                layout.len()
            )));
        }
        let kb = layout.dim + 2;
        let hypers = (0..layout.n_kernels)
            .map(|j| KernelHyper::from_slice(&flat[j * kb..(j + 1) * kb]))
            .collect::<Result<Vec<_>>>()?;
        let base = layout.n_kernels * kb;
        let zb = layout.n_inducing * layout.dim;
        let inducing = (0..layout.n_classes)
            .map(|c| DMatrix::from_row_slice(layout.n_inducing, layout.dim, &flat[base + c * zb..base + (c + 1) * zb]))
            .collect();
        Self::new(hypers, inducing)
    }
}

/// Shape of the flat parameter / gradient vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_classes: usize,
    pub n_kernels: usize,
    pub dim: usize,
    pub n_inducing: usize,
}

impl ParamLayout {
    pub fn kernel_len(&self) -> usize {
        self.n_kernels * (self.dim + 2)
    }

    pub fn len(&self) -> usize {
        self.kernel_len() + self.n_classes * self.n_inducing * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether flat index `j` addresses an inducing coordinate.
    pub fn is_inducing(&self, j: usize) -> bool {
        j >= self.kernel_len()
    }
}

/// Gradient with the same layout as [`GpParams::to_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        Self { layout, values: vec![0.0; layout.len()] }
    }

    /// Add one class's kernel and inducing gradient. With tied kernels every
    /// class accumulates into the shared block.
    pub fn add_class(&mut self, class: usize, hyper: &HyperGrad, inducing: &DMatrix<f64>) {
        let l = self.layout;
        let kb = l.dim + 2;
        let block = if l.n_kernels == 1 { 0 } else { class };
        for (j, g) in hyper.to_vec().into_iter().enumerate() {
            self.values[block * kb + j] += g;
        }
        let base = l.kernel_len() + class * l.n_inducing * l.dim;
        for r in 0..l.n_inducing {
            for d in 0..l.dim {
                self.values[base + r * l.dim + d] += inducing[(r, d)];
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let x = DMatrix::from_fn(12, 2, |i, j| (i * 2 + j) as f64 * 0.1);
        Dataset::new(x, (0..12).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn flat_round_trip_and_lengths() {
        let d = toy();
        for tied in [true, false] {
            let p = GpParams::initial(&d, 4, tied, 7).unwrap();
            let flat = p.to_flat();
            let kernels = if tied { 1 } else { 3 };
            assert_eq!(flat.len(), kernels * 4 + 3 * 4 * 2);
            assert_eq!(p.from_flat(&flat).unwrap(), p);
        }
    }

    #[test]
    fn too_many_inducing_points() {
        assert!(matches!(GpParams::initial(&toy(), 13, true, 0), Err(Error::Config(_))));
    }

    #[test]
    fn inducing_points_are_training_inputs() {
        let d = toy();
        let p = GpParams::initial(&d, 5, false, 3).unwrap();
        for z in &p.inducing {
            for r in z.row_iter() {
                assert!(d.x.row_iter().any(|x| x == r));
            }
        }
    }
}
