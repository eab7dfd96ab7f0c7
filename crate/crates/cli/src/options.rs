//! Training options: command-line flags merged over an optional TOML file.

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use epgpc::data::{CsvOptions, LabelColumn};
use epgpc::trainer::{Optimizer, Schedule, TraceObjective, TrainConfig};
use epgpc::Mode;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ep,
    Sep,
    Vi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleArg {
    /// Run EP to convergence between parameter steps.
    Outer,
    /// One EP pass per parameter step.
    Inner,
    /// Stochastic steps over minibatches; iterations count epochs.
    Minibatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Adaptive,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceObjectiveArg {
    /// Minibatch estimate of the objective (cheap).
    Batch,
    /// Objective over the whole training set.
    Full,
}

/// Every flag of `train`. All fields are optional so a config file can
/// fill the gaps; flags win on conflict.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    /// Training data (CSV, optionally gzip-compressed).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Label column: name, zero-based index or `last`.
    #[arg(long)]
    pub label_col: Option<String>,
    /// Field delimiter.
    #[arg(long)]
    pub delimiter: Option<char>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    /// Inducing points per class.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Parameter steps (epochs for minibatch training).
    #[arg(long)]
    pub iters: Option<usize>,
    /// Site damping in (0, 1].
    #[arg(long)]
    pub damping: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Snapshot output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Learning-curve CSV output path.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Held-out data evaluated while training.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Evaluate the test set every this many trace records (0: only at the end).
    #[arg(long)]
    pub test_every: Option<usize>,
    #[arg(long, value_enum)]
    pub trace_objective: Option<TraceObjectiveArg>,
    /// EP convergence tolerance (largest site change).
    #[arg(long)]
    pub ep_tol: Option<f64>,
    #[arg(long)]
    pub max_ep_passes: Option<usize>,
    /// Initial adaptive step of the kernel log-hypers.
    #[arg(long)]
    pub hyper_rate: Option<f64>,
    /// Initial adaptive step of the inducing coordinates.
    #[arg(long)]
    pub inducing_rate: Option<f64>,
    /// Initial adaptive step of the variational parameters (VI; default
    /// hyper-rate / N).
    #[arg(long)]
    pub variational_rate: Option<f64>,
    /// Adam step size.
    #[arg(long)]
    pub adam_alpha: Option<f64>,
    /// One kernel per class instead of a shared one.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub untied: Option<bool>,
    /// Keep kernel hyper-parameters at their initial values.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub fixed_hypers: Option<bool>,
    /// Keep inducing inputs at their initial values.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub fixed_inducing: Option<bool>,
    /// Train on raw features instead of standardized ones.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_standardize: Option<bool>,
    /// Write zero in the trace's seconds column (byte-reproducible traces).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_timing: Option<bool>,
}

macro_rules! prefer {
    ($a:ident, $b:ident, $($f:ident),* $(,)?) => {
        TrainOptions { $($f: $a.$f.or($b.$f)),* }
    };
}

impl TrainOptions {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let opts: TrainOptions =
            toml::from_str(&text).map_err(|e| crate::UsageError(format!("config {}: {e}", path.display())))?;
        Ok(opts)
    }

    /// `self` where set, otherwise `file`.
    pub fn over(self, file: TrainOptions) -> TrainOptions {
        prefer!(
            self,
            file,
            data,
            label_col,
            delimiter,
            method,
            schedule,
            m,
            batch_size,
            iters,
            damping,
            optimizer,
            seed,
            out,
            trace,
            test_data,
            test_every,
            trace_objective,
            ep_tol,
            max_ep_passes,
            hyper_rate,
            inducing_rate,
            variational_rate,
            adam_alpha,
            untied,
            fixed_hypers,
            fixed_inducing,
            no_standardize,
            no_timing,
        )
    }

    pub fn method(&self) -> Method {
        self.method.unwrap_or(Method::Ep)
    }

    pub fn standardize(&self) -> bool {
        !self.no_standardize.unwrap_or(false)
    }

    pub fn csv(&self) -> Result<CsvOptions> {
        csv_options(self.label_col.as_deref(), self.delimiter)
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let mut adam = d.adam;
        if let Some(a) = self.adam_alpha {
            adam.alpha = a;
        }
        TrainConfig {
            schedule: match self.schedule.unwrap_or(ScheduleArg::Outer) {
                ScheduleArg::Outer => Schedule::EpOuter,
                ScheduleArg::Inner => Schedule::EpInner,
                ScheduleArg::Minibatch => Schedule::Minibatch,
            },
            mode: if self.method() == Method::Sep { Mode::Sep } else { Mode::Ep },
            iterations: self.iters.unwrap_or(d.iterations),
            batch_size: self.batch_size,
            damping: self.damping,
            // The sign-adaptive rule is poorly scaled for the VI bound.
            optimizer: match self.optimizer.unwrap_or(if self.method() == Method::Vi {
                OptimizerArg::Adam
            } else {
                OptimizerArg::Adaptive
            }) {
                OptimizerArg::Adaptive => Optimizer::Adaptive,
                OptimizerArg::Adam => Optimizer::Adam,
            },
            adam,
            seed: self.seed.unwrap_or(d.seed),
            ep_tol: self.ep_tol.unwrap_or(d.ep_tol),
            max_ep_passes: self.max_ep_passes.unwrap_or(d.max_ep_passes),
            hyper_rate: self.hyper_rate.unwrap_or(d.hyper_rate),
            inducing_rate: self.inducing_rate.unwrap_or(d.inducing_rate),
            variational_rate: self.variational_rate,
            n_inducing: self.m.unwrap_or(d.n_inducing),
            tied: !self.untied.unwrap_or(false),
            learn_hypers: !self.fixed_hypers.unwrap_or(false),
            learn_inducing: !self.fixed_inducing.unwrap_or(false),
            trace_objective: match self.trace_objective.unwrap_or(TraceObjectiveArg::Batch) {
                TraceObjectiveArg::Batch => TraceObjective::Batch,
                TraceObjectiveArg::Full => TraceObjective::Full,
            },
            eval_every: self.test_every.unwrap_or(d.eval_every),
            record_time: !self.no_timing.unwrap_or(false),
            ..d
        }
    }
}

pub fn csv_options(label_col: Option<&str>, delimiter: Option<char>) -> Result<CsvOptions> {
    let delimiter = delimiter.unwrap_or(',');
    if !delimiter.is_ascii() {
        return Err(crate::UsageError(format!("delimiter `{delimiter}` must be a single ASCII character")).into());
    }
    Ok(CsvOptions {
        label: label_col.map_or(LabelColumn::Last, |s| s.parse().expect("infallible")),
        delimiter: delimiter as u8,
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let file: TrainOptions = toml::from_str("m = 7\nseed = 3\nmethod = \"sep\"\nno_timing = true\n").unwrap();
        let flags = TrainOptions { m: Some(12), ..Default::default() };
        let o = flags.over(file);
        assert_eq!(o.m, Some(12));
        assert_eq!(o.seed, Some(3));
        let cfg = o.train_config();
        assert_eq!(cfg.mode, Mode::Sep);
        assert_eq!(cfg.n_inducing, 12);
        assert!(!cfg.record_time);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<TrainOptions>("bogus = 1\n").is_err());
    }

    #[test]
    fn defaults_match_the_library() {
        let cfg = TrainOptions::default().train_config();
        assert_eq!(cfg, TrainConfig::default());
    }
}
