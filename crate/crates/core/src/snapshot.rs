//! Model persistence: a single JSON document whose scalar fields are readable
//! as-is and whose matrices are base64-encoded little-endian `f64` blobs, so
//! loading reproduces every number bit for bit.

use crate::data::Standardizer;
use crate::ep::{EpEngine, FullSites, Mode, SiteParams, SiteState, TiedSite};
use crate::error::{Error, Result};
use crate::gaussian::MomentGaussian;
use crate::kernel::KernelHyper;
use crate::model::GpParams;
use crate::predict::Predictor;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const FORMAT: &str = "epgpc-snapshot";
pub const VERSION: u32 = 1;

/// Inference method that produced a snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ep,
    Sep,
    Vi,
}

impl From<Mode> for Method {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Ep => Method::Ep,
            Mode::Sep => Method::Sep,
        }
    }
}

/// Column-major `f64` matrix, base64 of the little-endian bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Blob {
    rows: usize,
    cols: usize,
    data: String,
}

impl Blob {
    fn from_slice(rows: usize, cols: usize, v: &[f64]) -> Self {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        Self { rows, cols, data: STANDARD.encode(bytes) }
    }

    fn matrix(m: &DMatrix<f64>) -> Self {
        Self::from_slice(m.nrows(), m.ncols(), m.as_slice())
    }

    fn vector(v: &DVector<f64>) -> Self {
        Self::from_slice(v.len(), 1, v.as_slice())
    }

    fn values(&self) -> Result<Vec<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Snapshot(format!("corrupt matrix payload: {e}")))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(Error::Snapshot(format!(
                "matrix payload holds {} bytes, expected {}",
                bytes.len(),
                self.rows * self.cols * 8
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_vec(self.rows, self.cols, self.values()?))
    }

    fn to_vector(&self) -> Result<DVector<f64>> {
        if self.cols != 1 {
            return Err(Error::Snapshot("expected a column vector".into()));
        }
        Ok(DVector::from_vec(self.values()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HyperRecord {
    log_lengthscale: Blob,
    log_amplitude: Blob,
    log_noise: Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GaussianRecord {
    mean: Blob,
    cov: Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum SiteRecord {
    Full { n_classes: usize, table: Blob },
    Tied { precision: Vec<Blob>, shift: Vec<Blob>, counts: Vec<usize>, active: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    method: Method,
    n_classes: usize,
    dim: usize,
    n_inducing: usize,
    /// Readable copy of the hypers; the blobs are authoritative.
    hypers_readable: Vec<KernelHyper>,
    hypers: Vec<HyperRecord>,
    inducing: Vec<Blob>,
    posterior: Vec<GaussianRecord>,
    sites: Option<SiteRecord>,
    standardizer: Option<StandardizerRecord>,
    class_names: Vec<String>,
    feature_names: Option<Vec<String>>,
    seed: u64,
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StandardizerRecord {
    mean: Blob,
    scale: Blob,
}

/// Everything needed to predict with, inspect, or resume a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub method: Method,
    pub params: GpParams,
    /// Posterior over each class's inducing values.
    pub posterior: Vec<MomentGaussian>,
    pub sites: Option<SiteState>,
    /// Input transform applied before prediction, if the model was trained on
    /// standardized features.
    pub standardizer: Option<Standardizer>,
    pub class_names: Vec<String>,
    pub feature_names: Option<Vec<String>>,
    pub seed: u64,
    pub metadata: BTreeMap<String, String>,
}

impl ModelSnapshot {
    pub fn from_engine(engine: &EpEngine, seed: u64) -> Self {
        Self {
            method: engine.mode().into(),
            params: engine.params.clone(),
            posterior: engine.posterior.classes.iter().map(|q| q.moments()).collect(),
            sites: Some(engine.sites.clone()),
            standardizer: None,
            class_names: default_class_names(engine.n_classes()),
            feature_names: None,
            seed,
            metadata: BTreeMap::new(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.params.n_classes()
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn predictor(&self) -> Result<Predictor> {
        Predictor::new(&self.params, &self.posterior)
    }

    /// Apply the stored standardizer (identity if none).
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.standardizer {
            Some(s) => s.transform(x),
            None if x.ncols() == self.dim() => Ok(x.clone()),
            None => Err(Error::Dimension(format!(
                "inputs have {} features, model expects {}",
                x.ncols(),
                self.dim()
            ))),
        }
    }

    /// Class probabilities for raw (untransformed) inputs.
    pub fn probabilities(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.predictor()?.probabilities(&self.transform(x)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Snapshot(format!("unreadable snapshot: {e}")))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(FORMAT) => {}
            _ => return Err(Error::Snapshot("not a model snapshot".into())),
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Snapshot(format!("snapshot version {v} is not supported (expected {VERSION})")))
            }
            None => return Err(Error::Snapshot("snapshot has no version".into())),
        }
        let doc: Document =
            serde_json::from_value(value).map_err(|e| Error::Snapshot(format!("malformed snapshot: {e}")))?;
        Self::from_document(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn document(&self) -> Document {
        let scalar = |v: f64| Blob::from_slice(1, 1, &[v]);
        Document {
            format: FORMAT.into(),
            version: VERSION,
            method: self.method,
            n_classes: self.n_classes(),
            dim: self.dim(),
            n_inducing: self.params.n_inducing(),
            hypers_readable: self.params.hypers.clone(),
            hypers: self
                .params
                .hypers
                .iter()
                .map(|h| HyperRecord {
                    log_lengthscale: Blob::from_slice(h.log_lengthscale.len(), 1, &h.log_lengthscale),
                    log_amplitude: scalar(h.log_amplitude),
                    log_noise: scalar(h.log_noise),
                })
                .collect(),
            inducing: self.params.inducing.iter().map(Blob::matrix).collect(),
            posterior: self
                .posterior
                .iter()
                .map(|q| GaussianRecord { mean: Blob::vector(&q.mean), cov: Blob::matrix(&q.cov) })
                .collect(),
            sites: self.sites.as_ref().map(|s| match s {
                SiteState::Full(f) => {
                    let flat: Vec<f64> = f.sites.iter().flat_map(|p| p.to_array()).collect();
                    SiteRecord::Full { n_classes: f.n_classes, table: Blob::from_slice(5, f.sites.len(), &flat) }
                }
                SiteState::Tied(t) => SiteRecord::Tied {
                    precision: t.precision.iter().map(Blob::matrix).collect(),
                    shift: t.shift.iter().map(Blob::vector).collect(),
                    counts: t.counts.clone(),
                    active: t.active,
                },
            }),
            standardizer: self.standardizer.as_ref().map(|s| StandardizerRecord {
                mean: Blob::from_slice(s.mean.len(), 1, &s.mean),
                scale: Blob::from_slice(s.scale.len(), 1, &s.scale),
            }),
            class_names: self.class_names.clone(),
            feature_names: self.feature_names.clone(),
            seed: self.seed,
            metadata: self.metadata.clone(),
        }
    }

    fn from_document(doc: Document) -> Result<Self> {
        let scalar = |b: &Blob| -> Result<f64> {
            let v = b.values()?;
            v.first().copied().filter(|_| v.len() == 1).ok_or_else(|| Error::Snapshot("expected a scalar".into()))
        };
        let hypers = doc
            .hypers
            .iter()
            .map(|h| {
                Ok(KernelHyper {
                    log_lengthscale: h.log_lengthscale.values()?,
                    log_amplitude: scalar(&h.log_amplitude)?,
                    log_noise: scalar(&h.log_noise)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let inducing = doc.inducing.iter().map(Blob::to_matrix).collect::<Result<Vec<_>>>()?;
        let params = GpParams::new(hypers, inducing)?;
        if params.n_classes() != doc.n_classes || params.dim() != doc.dim || params.n_inducing() != doc.n_inducing {
            return Err(Error::Snapshot("header dimensions disagree with the payload".into()));
        }
        let posterior = doc
            .posterior
            .iter()
            .map(|g| Ok(MomentGaussian { mean: g.mean.to_vector()?, cov: g.cov.to_matrix()? }))
            .collect::<Result<Vec<_>>>()?;
        if posterior.len() != doc.n_classes || posterior.iter().any(|q| q.mean.len() != doc.n_inducing) {
            return Err(Error::Snapshot("posterior blocks do not match the model".into()));
        }
        let sites = match doc.sites {
            None => None,
            Some(SiteRecord::Full { n_classes, table }) => {
                if table.rows != 5 {
                    return Err(Error::Snapshot("site table must have five rows".into()));
                }
                let v = table.values()?;
                let sites = v
                    .chunks_exact(5)
                    .map(|c| SiteParams::from_array(c.try_into().expect("5 values")))
                    .collect();
                Some(SiteState::Full(FullSites { n_classes, sites }))
            }
            Some(SiteRecord::Tied { precision, shift, counts, active }) => Some(SiteState::Tied(TiedSite {
                precision: precision.iter().map(Blob::to_matrix).collect::<Result<_>>()?,
                shift: shift.iter().map(Blob::to_vector).collect::<Result<_>>()?,
                counts,
                active,
            })),
        };
        let standardizer = doc
            .standardizer
            .map(|s| Ok::<_, Error>(Standardizer { mean: s.mean.values()?, scale: s.scale.values()? }))
            .transpose()?;
        if doc.class_names.len() != doc.n_classes {
            return Err(Error::Snapshot("class-name list does not match the class count".into()));
        }
        Ok(Self {
            method: doc.method,
            params,
            posterior,
            sites,
            standardizer,
            class_names: doc.class_names,
            feature_names: doc.feature_names,
            seed: doc.seed,
            metadata: doc.metadata,
        })
    }
}

pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| c.to_string()).collect()
}
