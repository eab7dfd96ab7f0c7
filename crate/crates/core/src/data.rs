//! Datasets: CSV/LIBSVM ingestion, standardization, splitting and the
//! synthetic three-class generator.

use crate::error::{Error, Result};
use crate::gaussian::cholesky_stabilized;
use crate::kernel::{gram, KernelHyper};
use flate2::read::GzDecoder;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

/// Feature matrix with integer class labels in `0..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<usize>,
    pub n_classes: usize,
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Data(format!("{} feature rows but {} labels", x.nrows(), y.len())));
        }
        if n_classes < 2 {
            return Err(Error::Data("at least two classes are required".into()));
        }
        if let Some(bad) = y.iter().find(|&&c| c >= n_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {n_classes} classes")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("features contain non-finite values".into()));
        }
        Ok(Self { x, y, n_classes, feature_names: None })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx` as a new dataset (same class count).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            n_classes: self.n_classes,
            feature_names: self.feature_names.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }
}

/// Which column of a CSV file holds the label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
    Last,
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) if s == "last" => LabelColumn::Last,
            Err(_) => LabelColumn::Name(s.to_string()),
        })
    }
}

/// How raw label strings are mapped to class indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum LabelPolicy {
    /// Sorted distinct labels become `0..C`.
    #[default]
    Discover,
    /// Fixed mapping; labels outside it are an error.
    Fixed(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub label: LabelColumn,
    pub delimiter: u8,
    pub has_header: bool,
    pub labels: LabelPolicy,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            label: LabelColumn::Last,
            delimiter: b',',
            has_header: true,
            labels: LabelPolicy::Discover,
        }
    }
}

/// A loaded dataset plus the raw label string of every class index.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub class_names: Vec<String>,
}

fn open_text(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Read a delimited text file (optionally gzip-compressed, by `.gz` suffix).
pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<Loaded> {
    let mut text = String::new();
    open_text(path.as_ref())?.read_to_string(&mut text)?;
    parse_csv(&text, opts)
}

/// Parse delimited text already held in memory.
pub fn parse_csv(text: &str, opts: &CsvOptions) -> Result<Loaded> {
    let delim = opts.delimiter as char;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let header: Option<Vec<String>> = if opts.has_header {
        let (_, l) = lines.next().ok_or_else(|| Error::Data("file is empty".into()))?;
        Some(l.split(delim).map(|s| s.trim().trim_matches('"').to_string()).collect())
    } else {
        None
    };
    let rows: Vec<(usize, Vec<&str>)> = lines
        .map(|(n, l)| (n + 1, l.split(delim).map(str::trim).collect()))
        .collect();
    if rows.is_empty() {
        return Err(Error::Data("file contains no data rows".into()));
    }
    let width = header.as_ref().map_or(rows[0].1.len(), Vec::len);
    if width < 2 {
        return Err(Error::Data("need at least one feature column and a label column".into()));
    }
    let label_col = match &opts.label {
        LabelColumn::Last => width - 1,
        LabelColumn::Index(i) if *i < width => *i,
        LabelColumn::Index(i) => {
            return Err(Error::Data(format!("label column {i} out of range ({width} columns)")))
        }
        LabelColumn::Name(name) => header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| Error::Data(format!("no column named `{name}`")))?,
    };
    let mut raw_labels = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len() * (width - 1));
    for (line, fields) in &rows {
        if fields.len() != width {
            return Err(Error::Data(format!(
                "line {line}: expected {width} fields, found {}",
                fields.len()
            )));
        }
        for (j, f) in fields.iter().enumerate() {
            if j == label_col {
                raw_labels.push(f.trim_matches('"').to_string());
            } else {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::Data(format!("line {line}: non-numeric feature `{f}`")))?;
                values.push(v);
            }
        }
    }
    let class_names = match &opts.labels {
        LabelPolicy::Fixed(names) => names.clone(),
        LabelPolicy::Discover => discover_labels(&raw_labels),
    };
    let index: BTreeMap<&str, usize> =
        class_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let y = raw_labels
        .iter()
        .map(|l| {
            index
                .get(l.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("unseen label `{l}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let x = DMatrix::from_row_slice(rows.len(), width - 1, &values);
    let mut dataset = Dataset::new(x, y, class_names.len().max(2))?;
    dataset.feature_names = header.map(|h| {
        h.into_iter()
            .enumerate()
            .filter(|(j, _)| *j != label_col)
            .map(|(_, s)| s)
            .collect()
    });
    Ok(Loaded { dataset, class_names })
}

/// Read a delimited file whose columns are all features (no label), e.g.
/// inputs for prediction. Returns the matrix and the header if present.
pub fn load_features(path: impl AsRef<Path>, delimiter: u8, has_header: bool) -> Result<(DMatrix<f64>, Option<Vec<String>>)> {
    let mut text = String::new();
    open_text(path.as_ref())?.read_to_string(&mut text)?;
    parse_features(&text, delimiter, has_header)
}

pub fn parse_features(text: &str, delimiter: u8, has_header: bool) -> Result<(DMatrix<f64>, Option<Vec<String>>)> {
    let delim = delimiter as char;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header: Option<Vec<String>> = if has_header {
        let (_, l) = lines.next().ok_or_else(|| Error::Data("file is empty".into()))?;
        Some(l.split(delim).map(|s| s.trim().trim_matches('"').to_string()).collect())
    } else {
        None
    };
    let mut width = header.as_ref().map(Vec::len);
    let mut values = Vec::new();
    let mut n = 0;
    for (line, l) in lines {
        let fields: Vec<&str> = l.split(delim).map(str::trim).collect();
        let w = *width.get_or_insert(fields.len());
        if fields.len() != w {
            return Err(Error::Data(format!("line {}: expected {w} fields, found {}", line + 1, fields.len())));
        }
        for f in fields {
            values.push(
                f.parse::<f64>()
                    .map_err(|_| Error::Data(format!("line {}: non-numeric feature `{f}`", line + 1)))?,
            );
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("file contains no data rows".into()));
    }
    Ok((DMatrix::from_row_slice(n, width.unwrap_or(0), &values), header))
}

/// Distinct labels in numeric order when all parse as numbers, else lexical.
fn discover_labels(raw: &[String]) -> Vec<String> {
    let mut distinct: Vec<String> = raw.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.iter().all(|s| s.parse::<f64>().is_ok()) {
        distinct.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    distinct
}

/// Read a LIBSVM file (`label idx:val ...`, 1-based indices).
pub fn load_libsvm(path: impl AsRef<Path>, labels: &LabelPolicy) -> Result<Loaded> {
    let mut text = String::new();
    open_text(path.as_ref())?.read_to_string(&mut text)?;
    let mut raw_labels = Vec::new();
    let mut entries: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut dim = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        raw_labels.push(parts.next().unwrap_or_default().to_string());
        let mut row = Vec::new();
        for p in parts {
            let (i, v) = p
                .split_once(':')
                .ok_or_else(|| Error::Data(format!("line {}: malformed entry `{p}`", n + 1)))?;
            let i: usize = i
                .parse()
                .ok()
                .filter(|&i| i >= 1)
                .ok_or_else(|| Error::Data(format!("line {}: bad index `{i}`", n + 1)))?;
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Data(format!("line {}: non-numeric value `{v}`", n + 1)))?;
            dim = dim.max(i);
            row.push((i - 1, v));
        }
        entries.push(row);
    }
    if entries.is_empty() {
        return Err(Error::Data("file contains no data rows".into()));
    }
    let mut x = DMatrix::zeros(entries.len(), dim);
    for (r, row) in entries.iter().enumerate() {
        for &(j, v) in row {
            x[(r, j)] = v;
        }
    }
    let class_names = match labels {
        LabelPolicy::Fixed(names) => names.clone(),
        LabelPolicy::Discover => discover_labels(&raw_labels),
    };
    let y = raw_labels
        .iter()
        .map(|l| {
            class_names
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::Data(format!("unseen label `{l}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset::new(x, y, class_names.len().max(2))?;
    Ok(Loaded { dataset, class_names })
}

/// Per-feature affine transform fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Floor on the per-feature standard deviation.
pub const SCALE_FLOOR: f64 = 1e-8;

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
        let scale = x
            .column_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                var.sqrt().max(SCALE_FLOOR)
            })
            .collect();
        Self { mean, scale }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "standardizer fitted on {} features, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j]))
    }

    pub fn inverse(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * self.scale[j] + self.mean[j])
    }
}

/// Fit a [`Standardizer`] on `train` and apply it to `train` and every set in
/// `others` (statistics come from `train` only).
pub fn standardize(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, Standardizer)> {
    let st = Standardizer::fit(&train.x);
    let mut t = train.clone();
    t.x = st.transform(&train.x)?;
    let rest = others
        .iter()
        .map(|d| {
            let mut o = (*d).clone();
            o.x = st.transform(&d.x)?;
            Ok(o)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((t, rest, st))
}

/// Random train/test split with `fraction` of rows in the training part.
/// With `stratified`, each class is split separately so class ratios are kept
/// to within one instance.
pub fn split(data: &Dataset, fraction: f64, seed: u64, stratified: bool) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("split fraction {fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    if stratified {
        for c in 0..data.n_classes {
            let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.y[i] == c).collect();
            idx.shuffle(&mut rng);
            let n_train = (fraction * idx.len() as f64).round() as usize;
            train.extend_from_slice(&idx[..n_train]);
            test.extend_from_slice(&idx[n_train..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        // Shuffle once more so classes are interleaved deterministically.
        train.shuffle(&mut rng);
        test.shuffle(&mut rng);
    } else {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        let n_train = (fraction * idx.len() as f64).round() as usize;
        train = idx[..n_train].to_vec();
        test = idx[n_train..].to_vec();
    }
    Ok((data.subset(&train), data.subset(&test)))
}

/// Synthetic problem with its generating latent functions.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Latent values including the Gaussian contamination, `n × 3`; labels
    /// are their row-wise argmax.
    pub latents: DMatrix<f64>,
    /// Noise-free latent values, `n × 3`.
    pub clean: DMatrix<f64>,
    /// Kernel the latents were drawn with.
    pub hyper: KernelHyper,
}

impl Synthetic {
    /// Bayes-optimal labels: argmax of the noise-free latents.
    pub fn bayes_labels(&self) -> Vec<usize> {
        self.clean.row_iter().map(|r| r.transpose().argmax().0).collect()
    }
}

/// Sizes up to this are sampled with an exact joint Cholesky factorization.
const EXACT_LIMIT: usize = 3000;
const ANCHORS: usize = 2000;

/// Two-dimensional three-class problem: `x ~ U([-2.5, 2.5]²)`, three latent
/// functions drawn from a GP with unit lengthscale and amplitude, labels
/// `argmax(f + ε)` with `ε ~ N(0, 0.1²)`.
pub fn synthetic(n: usize, seed: u64) -> Result<Synthetic> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    let classes = 3;
    let hyper = KernelHyper::new(2, 1.0, 1.0, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.5..2.5));
    let clean = if n <= EXACT_LIMIT {
        sample_exact(&x, &hyper, classes, &mut rng)?
    } else {
        sample_anchored(&x, &hyper, classes, &mut rng)?
    };
    let sigma = hyper.noise2().sqrt();
    let latents = clean.map(|f| f + sigma * rng.sample::<f64, _>(StandardNormal));
    let y = latents.row_iter().map(|r| r.transpose().argmax().0).collect();
    let mut dataset = Dataset::new(x, y, classes)?;
    dataset.feature_names = Some(vec!["x0".into(), "x1".into()]);
    Ok(Synthetic { dataset, latents, clean, hyper })
}

fn noise_free_gram(x: &DMatrix<f64>, h: &KernelHyper) -> Result<DMatrix<f64>> {
    let mut k = gram(x, x, h, false)?;
    for i in 0..x.nrows() {
        k[(i, i)] += h.jitter();
    }
    Ok(k)
}

fn sample_exact(x: &DMatrix<f64>, h: &KernelHyper, classes: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let chol = cholesky_stabilized(&noise_free_gram(x, h)?, "synthetic prior")?;
    let eps = DMatrix::from_fn(n, classes, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l() * eps)
}

/// Exact draw at the first `ANCHORS` points, conditional mean elsewhere
/// (the conditional variance given 2000 anchors in the unit box is negligible).
fn sample_anchored(x: &DMatrix<f64>, h: &KernelHyper, classes: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let anchors = x.rows(0, ANCHORS).into_owned();
    let f_anchor = sample_exact(&anchors, h, classes, rng)?;
    let chol = cholesky_stabilized(&noise_free_gram(&anchors, h)?, "synthetic anchors")?;
    let weights = chol.solve(&f_anchor);
    let rest = x.rows(ANCHORS, x.nrows() - ANCHORS).into_owned();
    let cross = gram(&rest, &anchors, h, false)?;
    let f_rest = cross * weights;
    let mut out = DMatrix::zeros(x.nrows(), classes);
    out.rows_mut(0, ANCHORS).copy_from(&f_anchor);
    out.rows_mut(ANCHORS, x.nrows() - ANCHORS).copy_from(&f_rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> CsvOptions {
        CsvOptions::default()
    }

    #[test]
    fn three_row_csv() {
        let text = "a,b,label\n1,2,x\n3,4,y\n5,6,x\n";
        let l = parse_csv(text, &opts()).unwrap();
        assert_eq!(l.dataset.len(), 3);
        assert_eq!(l.dataset.dim(), 2);
        assert_eq!(l.dataset.y, vec![0, 1, 0]);
        assert_eq!(l.class_names, vec!["x", "y"]);
        assert_eq!(l.dataset.x[(2, 1)], 6.0);
        assert_eq!(l.dataset.feature_names.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
    }

    #[test]
    fn feature_only_files() {
        let (x, h) = parse_features("a,b\n1,2\n3,4\n", b',', true).unwrap();
        assert_eq!((x.nrows(), x.ncols(), x[(1, 0)]), (2, 2, 3.0));
        assert_eq!(h.unwrap(), vec!["a", "b"]);
        assert!(parse_features("1,2\n3\n", b',', false).is_err());
        assert!(parse_features("a\n", b',', true).is_err());
    }

    #[test]
    fn label_by_name_and_index() {
        let text = "class;f1\n2;0.5\n10;1.5\n";
        let mut o = opts();
        o.delimiter = b';';
        o.label = "class".parse().unwrap();
        let l = parse_csv(text, &o).unwrap();
        assert_eq!(l.class_names, vec!["2", "10"]);
        o.label = "0".parse().unwrap();
        assert_eq!(parse_csv(text, &o).unwrap().dataset.y, vec![0, 1]);
    }

    #[test]
    fn malformed_inputs_are_errors() {
        assert!(matches!(parse_csv("", &opts()), Err(Error::Data(_))));
        assert!(matches!(parse_csv("a,b\n", &opts()), Err(Error::Data(_))));
        assert!(matches!(parse_csv("a,b\n1,2\n3\n", &opts()), Err(Error::Data(_))));
        assert!(matches!(parse_csv("a,b\nfoo,2\n", &opts()), Err(Error::Data(_))));
        let mut o = opts();
        o.labels = LabelPolicy::Fixed(vec!["0".into(), "1".into()]);
        assert!(matches!(parse_csv("a,b\n1,2\n", &o), Err(Error::Data(_))));
    }

    #[test]
    fn standardizer_behaviour() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]);
        let st = Standardizer::fit(&x);
        let z = st.transform(&x).unwrap();
        assert!(z.column(0).sum().abs() < 1e-12);
        assert!((z.column(0).map(|v| v * v).sum() / 4.0 - 1.0).abs() < 1e-12);
        assert!(z.column(1).iter().all(|v| *v == 0.0));
        assert!((st.inverse(&z) - x).norm() < 1e-12);
    }

    #[test]
    fn split_properties() {
        let x = DMatrix::from_fn(40, 1, |i, _| i as f64);
        let y: Vec<usize> = (0..40).map(|i| if i < 10 { 0 } else { 1 }).collect();
        let d = Dataset::new(x, y, 2).unwrap();
        let (tr, te) = split(&d, 1.0, 3, false).unwrap();
        assert_eq!((tr.len(), te.len()), (40, 0));
        let a = split(&d, 0.75, 3, true).unwrap();
        let b = split(&d, 0.75, 3, true).unwrap();
        assert_eq!(a.0, b.0);
        let counts = a.1.class_counts();
        assert!((counts[0] as i64 - 3).abs() <= 1 && (counts[1] as i64 - 7).abs() <= 1);
        let mut all: Vec<f64> = a.0.x.iter().chain(a.1.x.iter()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..40).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_is_seeded_and_consistent() {
        let a = synthetic(200, 1).unwrap();
        let b = synthetic(200, 1).unwrap();
        let c = synthetic(200, 2).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_ne!(a.dataset.x, c.dataset.x);
        assert!(a.dataset.x.iter().all(|v| (-2.5..2.5).contains(v)));
        for (i, r) in a.latents.row_iter().enumerate() {
            assert_eq!(r.transpose().argmax().0, a.dataset.y[i]);
        }
        // Noisy labels agree with the noise-free argmax most of the time.
        let agree = a.bayes_labels().iter().zip(&a.dataset.y).filter(|(p, q)| p == q).count();
        assert!(agree > 170, "{agree}");
    }
}
