//! Training schedules and step-size control.
//!
//! * EP-outer: EP is re-run to convergence (warm-started) after every
//!   parameter step, so each gradient is taken at a fixed point.
//! * EP-inner: one parallel EP pass and one parameter step per iteration.
//! * Minibatch: per batch, one pass over the batch's sites, then one step
//!   along the stochastic gradient; `iterations` counts epochs.
//!
//! A step whose new parameters break the numerics is undone and the step
//! sizes are halved.

use crate::data::Dataset;
use crate::ep::{EpEngine, Mode};
use crate::error::{Error, Result};
use crate::model::{GpParams, GradientVector, ParamLayout};
use crate::objective::{grad_log_zq, log_zq, log_zq_estimate, stochastic_grad};
use crate::predict::{evaluate, Predictor, QUAD_ORDER};
use crate::projection::Priors;
use crate::snapshot::{Method, ModelSnapshot};
use crate::vi::{elbo, elbo_grad, ElboConfig, VariationalState, EPSILON};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    EpOuter,
    EpInner,
    Minibatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adaptive,
    Adam,
}

/// What the `log_zq` column of the trace holds in minibatch training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceObjective {
    /// The minibatch estimate used for the step (cheap, noisy).
    Batch,
    /// The objective over the whole training set.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { alpha: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub mode: Mode,
    /// Parameter steps (batch schedules) or epochs (minibatch).
    pub iterations: usize,
    /// Minibatch size; `None` means the whole training set.
    pub batch_size: Option<usize>,
    /// Site damping `ρ ∈ (0, 1]`; `None` picks 0.7 for batch schedules and 1
    /// for minibatches.
    pub damping: Option<f64>,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Largest site change at which EP counts as converged.
    pub ep_tol: f64,
    pub max_ep_passes: usize,
    /// Initial adaptive rate of kernel log-hypers.
    pub hyper_rate: f64,
    /// Initial adaptive rate of inducing coordinates.
    pub inducing_rate: f64,
    /// Initial adaptive rate of the variational parameters (VI only);
    /// `None` means `hyper_rate / N`.
    pub variational_rate: Option<f64>,
    pub n_inducing: usize,
    /// One kernel shared by all classes.
    pub tied: bool,
    pub learn_hypers: bool,
    pub learn_inducing: bool,
    pub trace_objective: TraceObjective,
    /// Test metrics every this many records (0: only at the end).
    pub eval_every: usize,
    /// Record wall-clock seconds (off gives byte-identical traces).
    pub record_time: bool,
    pub quad_order: usize,
    pub vi_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::EpOuter,
            mode: Mode::Ep,
            iterations: 250,
            batch_size: None,
            damping: None,
            optimizer: Optimizer::Adaptive,
            adam: AdamConfig::default(),
            seed: 0,
            ep_tol: 1e-6,
            max_ep_passes: 200,
            hyper_rate: 1e-2,
            inducing_rate: 1e-3,
            variational_rate: None,
            n_inducing: 10,
            tied: true,
            learn_hypers: true,
            learn_inducing: true,
            trace_objective: TraceObjective::Batch,
            eval_every: 1,
            record_time: true,
            quad_order: QUAD_ORDER,
            vi_epsilon: EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn damping(&self) -> f64 {
        self.damping.unwrap_or(match self.schedule {
            Schedule::Minibatch => 1.0,
            _ => 0.7,
        })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let rho = self.damping();
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Config(format!("damping {rho} outside (0, 1]")));
        }
        match self.batch_size {
            Some(0) => return Err(Error::Config("batch size must be positive".into())),
            Some(b) if b > n => {
                return Err(Error::Config(format!("batch size {b} exceeds the {n} training points")))
            }
            _ => {}
        }
        if self.n_inducing == 0 || self.n_inducing > n {
            return Err(Error::Config(format!(
                "number of inducing points ({}) must be in 1..={n}",
                self.n_inducing
            )));
        }
        if !(self.hyper_rate > 0.0 && self.inducing_rate > 0.0 && self.adam.alpha > 0.0 && self.variational_rate.is_none_or(|r| r > 0.0)) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if self.quad_order == 0 {
            return Err(Error::Config("quadrature order must be positive".into()));
        }
        if !(self.vi_epsilon > 0.0 && self.vi_epsilon < 1.0) {
            return Err(Error::Config("label-noise level must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub seconds: f64,
    pub log_zq: f64,
    pub test_error: Option<f64>,
    pub test_nll: Option<f64>,
    /// Set when something noteworthy happened (EP not converged, a step
    /// was undone).
    pub note: Option<String>,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub snapshot: ModelSnapshot,
    pub trace: Vec<TraceRecord>,
}

/// Sink receiving every trace record as it is produced.
pub type Sink<'a> = &'a mut dyn FnMut(&TraceRecord);

/// Multiplicative rate changes of the adaptive rule.
pub const RATE_GROW: f64 = 1.02;
pub const RATE_SHRINK: f64 = 0.5;

/// Per-parameter adaptive ascent: `rate_j` grows by 2% while the sign of
/// `g_j` is unchanged (a zero gradient counts as unchanged) and halves on a
/// sign flip; the first step (`prev_signs = None`) keeps the rates. Returns
/// the step `rate ⊙ grad` (with the updated rates) and the signs to compare
/// against next time.
pub fn adaptive_rate_step(grad: &[f64], rates: &mut [f64], prev_signs: Option<&[i8]>) -> (Vec<f64>, Vec<i8>) {
    let mut signs = Vec::with_capacity(grad.len());
    let mut delta = Vec::with_capacity(grad.len());
    for (j, &g) in grad.iter().enumerate() {
        let prev = prev_signs.map(|p| p[j]).unwrap_or(0);
        let s = if g > 0.0 {
            1
        } else if g < 0.0 {
            -1
        } else {
            prev
        };
        if prev_signs.is_some() {
            rates[j] *= if prev != 0 && s != prev { RATE_SHRINK } else { RATE_GROW };
        }
        signs.push(s);
        delta.push(rates[j] * g);
    }
    (delta, signs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// Bias-corrected ADAM ascent step; `scale` multiplies `α`.
pub fn adam_step(grad: &[f64], state: &mut AdamState, cfg: &AdamConfig, scale: f64) -> Vec<f64> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    grad.iter()
        .enumerate()
        .map(|(j, &g)| {
            state.m[j] = cfg.beta1 * state.m[j] + (1.0 - cfg.beta1) * g;
            state.v[j] = cfg.beta2 * state.v[j] + (1.0 - cfg.beta2) * g * g;
            let mh = state.m[j] / c1;
            let vh = state.v[j] / c2;
            scale * cfg.alpha * mh / (vh.sqrt() + cfg.epsilon)
        })
        .collect()
}

/// Optimizer state over a flat parameter vector with a learnability mask.
#[derive(Debug, Clone)]
struct Stepper {
    kind: Optimizer,
    rates: Vec<f64>,
    signs: Option<Vec<i8>>,
    adam: AdamState,
    adam_cfg: AdamConfig,
    adam_scale: f64,
    mask: Vec<bool>,
}

impl Stepper {
    fn new(cfg: &TrainConfig, rates: Vec<f64>, mask: Vec<bool>) -> Self {
        let n = rates.len();
        Self {
            kind: cfg.optimizer,
            rates,
            signs: None,
            adam: AdamState::new(n),
            adam_cfg: cfg.adam,
            adam_scale: 1.0,
            mask,
        }
    }

    fn step(&mut self, grad: &[f64]) -> Vec<f64> {
        let g: Vec<f64> = grad.iter().zip(&self.mask).map(|(&g, &on)| if on { g } else { 0.0 }).collect();
        match self.kind {
            Optimizer::Adaptive => {
                let (delta, signs) = adaptive_rate_step(&g, &mut self.rates, self.signs.as_deref());
                self.signs = Some(signs);
                delta
            }
            Optimizer::Adam => adam_step(&g, &mut self.adam, &self.adam_cfg, self.adam_scale),
        }
    }

    fn shrink(&mut self) {
        self.rates.iter_mut().for_each(|r| *r *= RATE_SHRINK);
        self.adam_scale *= RATE_SHRINK;
    }
}

fn param_rates(layout: &ParamLayout, cfg: &TrainConfig) -> (Vec<f64>, Vec<bool>) {
    (0..layout.len())
        .map(|j| {
            if layout.is_inducing(j) {
                (cfg.inducing_rate, cfg.learn_inducing)
            } else {
                (cfg.hyper_rate, cfg.learn_hypers)
            }
        })
        .unzip()
}

/// Consecutive undone steps tolerated before training gives up.
const MAX_FAILED_STEPS: usize = 20;

struct Recorder<'a, 'b> {
    start: Instant,
    record_time: bool,
    eval_every: usize,
    test: Option<&'a Dataset>,
    trace: Vec<TraceRecord>,
    sink: Sink<'b>,
}

impl Recorder<'_, '_> {
    fn push(&mut self, log_zq: f64, predictor: impl FnOnce() -> Result<Predictor>, last: bool, note: Option<String>) -> Result<()> {
        let iteration = self.trace.len();
        let due = last || (self.eval_every > 0 && iteration % self.eval_every == 0);
        let (test_error, test_nll) = match self.test {
            Some(t) if due => {
                let m = evaluate(&predictor()?, t)?;
                (Some(m.error_rate), Some(m.nll))
            }
            _ => (None, None),
        };
        let seconds = if self.record_time { self.start.elapsed().as_secs_f64() } else { 0.0 };
        let rec = TraceRecord { iteration, seconds, log_zq, test_error, test_nll, note };
        (self.sink)(&rec);
        self.trace.push(rec);
        Ok(())
    }
}

fn initial_params(data: &Dataset, cfg: &TrainConfig, init: Option<GpParams>) -> Result<GpParams> {
    match init {
        Some(p) => {
            if p.n_classes() != data.n_classes || p.dim() != data.dim() {
                return Err(Error::Dimension("initial parameters do not match the dataset".into()));
            }
            Ok(p)
        }
        None => GpParams::initial(data, cfg.n_inducing, cfg.tied, cfg.seed),
    }
}

fn engine_predictor(engine: &EpEngine) -> impl FnOnce() -> Result<Predictor> + '_ {
    move || Predictor::from_engine(engine)
}

/// Apply `delta` to the engine's parameters. On a numerical failure the
/// engine is left untouched and the error returned.
fn apply_step(engine: &mut EpEngine, data: &Dataset, delta: &[f64]) -> Result<()> {
    let mut flat = engine.params.to_flat();
    for (p, d) in flat.iter_mut().zip(delta) {
        *p += d;
    }
    let params = engine.params.from_flat(&flat)?;
    engine.set_params(data, params)
}

fn finish(engine: &EpEngine, cfg: &TrainConfig, final_log_zq: f64) -> ModelSnapshot {
    let mut s = ModelSnapshot::from_engine(engine, cfg.seed);
    s.metadata.insert("schedule".into(), format!("{:?}", cfg.schedule));
    s.metadata.insert("optimizer".into(), format!("{:?}", cfg.optimizer));
    s.metadata.insert("iterations".into(), cfg.iterations.to_string());
    s.metadata.insert("log_zq".into(), format!("{final_log_zq}"));
    s
}

/// Train according to `cfg.schedule` (EP or SEP per `cfg.mode`).
pub fn fit(data: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig, init: Option<GpParams>, sink: Sink) -> Result<Fitted> {
    cfg.validate(data.len())?;
    if let Some(t) = test {
        if t.dim() != data.dim() || t.n_classes != data.n_classes {
            return Err(Error::Dimension("test set does not match the training set".into()));
        }
    }
    let params = initial_params(data, cfg, init)?;
    let mut rec = Recorder {
        start: Instant::now(),
        record_time: cfg.record_time,
        eval_every: cfg.eval_every,
        test,
        trace: Vec::new(),
        sink,
    };
    let engine = match cfg.schedule {
        Schedule::EpOuter => run_ep_outer(data, cfg, params, &mut rec)?,
        Schedule::EpInner => run_ep_inner(data, cfg, params, &mut rec)?,
        Schedule::Minibatch => run_minibatch(data, cfg, params, &mut rec)?,
    };
    let last = rec.trace.last().map_or(0.0, |r| r.log_zq);
    Ok(Fitted { snapshot: finish(&engine, cfg, last), trace: rec.trace })
}

fn no_sink() -> impl FnMut(&TraceRecord) {
    |_| {}
}

pub fn fit_ep_outer(data: &Dataset, cfg: &TrainConfig) -> Result<Fitted> {
    let cfg = TrainConfig { schedule: Schedule::EpOuter, ..cfg.clone() };
    fit(data, None, &cfg, None, &mut no_sink())
}

pub fn fit_ep_inner(data: &Dataset, cfg: &TrainConfig) -> Result<Fitted> {
    let cfg = TrainConfig { schedule: Schedule::EpInner, ..cfg.clone() };
    fit(data, None, &cfg, None, &mut no_sink())
}

pub fn fit_minibatch(data: &Dataset, cfg: &TrainConfig) -> Result<Fitted> {
    let cfg = TrainConfig { schedule: Schedule::Minibatch, ..cfg.clone() };
    fit(data, None, &cfg, None, &mut no_sink())
}

fn convergence_note(conv: &crate::ep::Convergence) -> Option<String> {
    (!conv.converged).then(|| format!("EP not converged after {} passes", conv.passes))
}

fn run_ep_outer(data: &Dataset, cfg: &TrainConfig, params: GpParams, rec: &mut Recorder) -> Result<EpEngine> {
    let rho = cfg.damping();
    let mut engine = EpEngine::new(data, params, cfg.mode)?;
    let conv = engine.run_to_convergence(data, rho, cfg.ep_tol, cfg.max_ep_passes)?;
    let (rates, mask) = param_rates(&engine.params.layout(), cfg);
    let mut stepper = Stepper::new(cfg, rates, mask);
    rec.push(log_zq(&engine, data)?, engine_predictor(&engine), cfg.iterations == 0, convergence_note(&conv))?;
    let mut failures = 0;
    for it in 1..=cfg.iterations {
        let grad = grad_log_zq(&engine, data)?;
        let delta = stepper.step(&grad.values);
        let backup = engine.clone();
        let attempt = apply_step(&mut engine, data, &delta)
            .and_then(|_| engine.run_to_convergence(data, rho, cfg.ep_tol, cfg.max_ep_passes));
        let note = match attempt {
            Ok(conv) => {
                failures = 0;
                convergence_note(&conv)
            }
            Err(e) if e.is_numerical() => {
                engine = backup;
                stepper.shrink();
                failures += 1;
                if failures > MAX_FAILED_STEPS {
                    return Err(e);
                }
                Some(format!("step undone: {e}"))
            }
            Err(e) => return Err(e),
        };
        rec.push(log_zq(&engine, data)?, engine_predictor(&engine), it == cfg.iterations, note)?;
    }
    Ok(engine)
}

fn run_ep_inner(data: &Dataset, cfg: &TrainConfig, params: GpParams, rec: &mut Recorder) -> Result<EpEngine> {
    let rho = cfg.damping();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut engine = EpEngine::new(data, params, cfg.mode)?;
    let (rates, mask) = param_rates(&engine.params.layout(), cfg);
    let mut stepper = Stepper::new(cfg, rates, mask);
    rec.push(log_zq(&engine, data)?, engine_predictor(&engine), cfg.iterations == 0, None)?;
    let mut failures = 0;
    for it in 1..=cfg.iterations {
        engine.pass_with_retry(data, &all, rho)?;
        let grad = grad_log_zq(&engine, data)?;
        let delta = stepper.step(&grad.values);
        let note = match apply_step(&mut engine, data, &delta) {
            Ok(()) => {
                failures = 0;
                None
            }
            Err(e) if e.is_numerical() => {
                stepper.shrink();
                failures += 1;
                if failures > MAX_FAILED_STEPS {
                    return Err(e);
                }
                Some(format!("step undone: {e}"))
            }
            Err(e) => return Err(e),
        };
        rec.push(log_zq(&engine, data)?, engine_predictor(&engine), it == cfg.iterations, note)?;
    }
    Ok(engine)
}

fn run_minibatch(data: &Dataset, cfg: &TrainConfig, params: GpParams, rec: &mut Recorder) -> Result<EpEngine> {
    let rho = cfg.damping();
    let n = data.len();
    let batch = cfg.batch_size.unwrap_or(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut engine = EpEngine::new(data, params, cfg.mode)?;
    let (rates, mask) = param_rates(&engine.params.layout(), cfg);
    let mut stepper = Stepper::new(cfg, rates, mask);
    let all: Vec<usize> = (0..n).collect();
    rec.push(log_zq(&engine, data)?, engine_predictor(&engine), cfg.iterations == 0, None)?;
    let mut order = all.clone();
    let mut failures = 0;
    for epoch in 1..=cfg.iterations {
        order.shuffle(&mut rng);
        let chunks: Vec<&[usize]> = order.chunks(batch).collect();
        for (b, rows) in chunks.iter().enumerate() {
            let mut rows = rows.to_vec();
            rows.sort_unstable();
            engine.pass_with_retry(data, &rows, rho)?;
            let grad: GradientVector = stochastic_grad(&engine, data, &rows)?;
            let delta = stepper.step(&grad.values);
            let note = match apply_step(&mut engine, data, &delta) {
                Ok(()) => {
                    failures = 0;
                    None
                }
                Err(e) if e.is_numerical() => {
                    stepper.shrink();
                    failures += 1;
                    if failures > MAX_FAILED_STEPS {
                        return Err(e);
                    }
                    Some(format!("step undone: {e}"))
                }
                Err(e) => return Err(e),
            };
            let value = match cfg.trace_objective {
                TraceObjective::Batch => log_zq_estimate(&engine, data, &rows)?,
                TraceObjective::Full => log_zq(&engine, data)?,
            };
            let last = epoch == cfg.iterations && b + 1 == chunks.len();
            rec.push(value, engine_predictor(&engine), last, note)?;
        }
    }
    Ok(engine)
}

/// Variational baseline: ascent on the bound over the variational
/// parameters and the model parameters jointly, with minibatches when
/// `cfg.batch_size` is set (`iterations` then counts epochs).
pub fn fit_vi(data: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig, init: Option<GpParams>, sink: Sink) -> Result<Fitted> {
    cfg.validate(data.len())?;
    let mut params = initial_params(data, cfg, init)?;
    let mut priors = Priors::new(&params)?;
    let mut state = VariationalState::from_prior(&priors);
    let (c, m) = (params.n_classes(), params.n_inducing());
    let n_var = VariationalState::flat_len(c, m);
    let (prates, pmask) = param_rates(&params.layout(), cfg);
    // ELBO gradients in the variational parameters grow with N.
    let vr = cfg.variational_rate.unwrap_or(cfg.hyper_rate / data.len() as f64);
    let rates: Vec<f64> = std::iter::repeat_n(vr, n_var).chain(prates).collect();
    let mask: Vec<bool> = std::iter::repeat_n(true, n_var).chain(pmask).collect();
    let mut stepper = Stepper::new(cfg, rates, mask);
    let ecfg = ElboConfig { epsilon: cfg.vi_epsilon, quad_order: cfg.quad_order };
    let mut rec = Recorder {
        start: Instant::now(),
        record_time: cfg.record_time,
        eval_every: cfg.eval_every,
        test,
        trace: Vec::new(),
        sink,
    };
    let n = data.len();
    let batch = cfg.batch_size.unwrap_or(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut order: Vec<usize> = (0..n).collect();
    let predictor = |p: &GpParams, s: &VariationalState| Predictor::new(p, &s.moments());
    rec.push(elbo(data, &state, &priors, &ecfg)?, || predictor(&params, &state), cfg.iterations == 0, None)?;
    let mut failures = 0;
    for epoch in 1..=cfg.iterations {
        if batch < n {
            order.shuffle(&mut rng);
        }
        let chunks: Vec<Vec<usize>> = order
            .chunks(batch)
            .map(|r| {
                let mut r = r.to_vec();
                r.sort_unstable();
                r
            })
            .collect();
        for (b, rows) in chunks.iter().enumerate() {
            let g = elbo_grad(data, rows, &state, &params, &priors, &ecfg)?;
            let grad: Vec<f64> = g.variational.iter().chain(&g.params.values).copied().collect();
            let delta = stepper.step(&grad);
            let mut vflat = state.to_flat();
            vflat.iter_mut().zip(&delta[..n_var]).for_each(|(p, d)| *p += d);
            let mut pflat = params.to_flat();
            pflat.iter_mut().zip(&delta[n_var..]).for_each(|(p, d)| *p += d);
            let attempt = VariationalState::from_flat(c, m, &vflat).and_then(|s| {
                crate::vi::validate(&s)?;
                let p = params.from_flat(&pflat)?;
                let pr = Priors::new(&p)?;
                Ok((s, p, pr))
            });
            let note = match attempt {
                Ok((s, p, pr)) => {
                    state = s;
                    params = p;
                    priors = pr;
                    failures = 0;
                    None
                }
                Err(e) if e.is_numerical() => {
                    stepper.shrink();
                    failures += 1;
                    if failures > MAX_FAILED_STEPS {
                        return Err(e);
                    }
                    Some(format!("step undone: {e}"))
                }
                Err(e) => return Err(e),
            };
            let value = match (batch < n, cfg.trace_objective) {
                (true, TraceObjective::Batch) => elbo_grad(data, rows, &state, &params, &priors, &ecfg)?.value,
                _ => elbo(data, &state, &priors, &ecfg)?,
            };
            let last = epoch == cfg.iterations && b + 1 == chunks.len();
            rec.push(value, || predictor(&params, &state), last, note)?;
        }
    }
    let posterior = state.moments();
    let final_value = rec.trace.last().map_or(0.0, |r| r.log_zq);
    let mut snapshot = ModelSnapshot {
        method: Method::Vi,
        params,
        posterior,
        sites: None,
        standardizer: None,
        class_names: crate::snapshot::default_class_names(c),
        feature_names: None,
        seed: cfg.seed,
        metadata: Default::default(),
    };
    snapshot.metadata.insert("optimizer".into(), format!("{:?}", cfg.optimizer));
    snapshot.metadata.insert("iterations".into(), cfg.iterations.to_string());
    snapshot.metadata.insert("elbo".into(), format!("{final_value}"));
    Ok(Fitted { snapshot, trace: rec.trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;

    #[test]
    fn adaptive_rule() {
        let mut rates = vec![1.0, 1.0, 1.0];
        let (d, s) = adaptive_rate_step(&[1.0, -2.0, 0.0], &mut rates, None);
        assert_eq!(rates, vec![1.0, 1.0, 1.0]);
        assert_eq!(d, vec![1.0, -2.0, 0.0]);
        let (d, _) = adaptive_rate_step(&[3.0, 2.0, 0.0], &mut rates, Some(&s));
        assert_eq!(rates, vec![1.02, 0.5, 1.02]);
        assert_eq!(d, vec![3.06, 1.0, 0.0]);
    }

    #[test]
    fn zero_gradient_keeps_last_sign() {
        let mut rates = vec![1.0];
        let (_, s) = adaptive_rate_step(&[1.0], &mut rates, None);
        let (_, s) = adaptive_rate_step(&[0.0], &mut rates, Some(&s));
        assert_eq!(s, vec![1]);
        adaptive_rate_step(&[-1.0], &mut rates, Some(&s));
        assert!((rates[0] - 1.02 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(1);
        let d = adam_step(&[1.0], &mut st, &cfg, 1.0);
        assert!((d[0] - 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        let mut st = AdamState::new(2);
        assert_eq!(adam_step(&[0.0, 0.0], &mut st, &cfg, 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn adam_maximizes_a_quadratic() {
        let cfg = AdamConfig { alpha: 0.05, ..Default::default() };
        let mut st = AdamState::new(2);
        let target = [1.5, -0.7];
        let mut x = [0.0, 0.0];
        for _ in 0..2000 {
            let g: Vec<f64> = (0..2).map(|j| -2.0 * (x[j] - target[j])).collect();
            let d = adam_step(&g, &mut st, &cfg, 1.0);
            x[0] += d[0];
            x[1] += d[1];
        }
        assert!((x[0] - target[0]).abs() < 1e-3 && (x[1] - target[1]).abs() < 1e-3);
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { iterations: 3, n_inducing: 5, record_time: false, ..Default::default() }
    }

    #[test]
    fn zero_iterations_give_converged_ep() {
        let s = synthetic(40, 1).unwrap();
        let cfg = TrainConfig { iterations: 0, max_ep_passes: 5000, ..small_cfg() };
        let f = fit_ep_outer(&s.dataset, &cfg).unwrap();
        assert_eq!(f.trace.len(), 1);
        assert!(f.trace[0].note.is_none(), "{:?}", f.trace[0].note);
    }

    #[test]
    fn traces_are_deterministic() {
        let s = synthetic(40, 2).unwrap();
        for schedule in [Schedule::EpOuter, Schedule::EpInner, Schedule::Minibatch] {
            let cfg = TrainConfig { schedule, batch_size: Some(10), ..small_cfg() };
            let a = fit(&s.dataset, None, &cfg, None, &mut |_| {}).unwrap();
            let b = fit(&s.dataset, None, &cfg, None, &mut |_| {}).unwrap();
            assert_eq!(a.trace, b.trace);
            assert_eq!(a.snapshot, b.snapshot);
        }
    }

    #[test]
    fn sink_sees_every_record() {
        let s = synthetic(30, 3).unwrap();
        let mut seen = 0;
        let f = fit(&s.dataset, Some(&s.dataset), &small_cfg(), None, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, f.trace.len());
        assert!(f.trace.last().unwrap().test_error.is_some());
        assert!(f.trace.windows(2).all(|w| w[1].iteration == w[0].iteration + 1));
    }

    #[test]
    fn config_is_validated() {
        let s = synthetic(20, 4).unwrap();
        let bad = TrainConfig { n_inducing: 21, ..small_cfg() };
        assert!(matches!(fit_ep_outer(&s.dataset, &bad), Err(Error::Config(_))));
        let bad = TrainConfig { batch_size: Some(30), ..small_cfg() };
        assert!(matches!(fit_minibatch(&s.dataset, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn vi_bound_increases() {
        let s = synthetic(40, 5).unwrap();
        let cfg = TrainConfig { iterations: 30, optimizer: Optimizer::Adam, adam: AdamConfig { alpha: 0.01, ..Default::default() }, ..small_cfg() };
        let f = fit_vi(&s.dataset, None, &cfg, None, &mut |_| {}).unwrap();
        assert!(f.trace.last().unwrap().log_zq > f.trace[0].log_zq);
        assert_eq!(f.snapshot.method, Method::Vi);
    }
}
