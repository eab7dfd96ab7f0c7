//! End-to-end acceptance checks. Runs every criterion in sequence, prints one
//! `PASS`/`FAIL` line per criterion and exits non-zero if any failed.
//!
//! `EPGPC_ACCEPT=3,7` runs only the listed criteria.

use epgpc::data::{load_csv, split, standardize, synthetic, CsvOptions, LabelColumn};
use epgpc::ep::{EpEngine, Mode, SiteState};
use epgpc::model::GpParams;
use epgpc::objective::{grad_log_zq, log_zq, stochastic_grad};
use epgpc::oracles::{
    check_tilted, dense_log_zq, dense_posterior, exact_factor_quadrature, gradient_check, product_approximation,
    random_state, relative_error, scaled_gap, CavityConfig,
};
use epgpc::predict::{evaluate, Predictor};
use epgpc::trainer::{fit, Optimizer, Schedule, TraceObjective, TrainConfig};
use epgpc::vi::{expected_log_lik, kl, Marginals, VariationalState, EPSILON};
use epgpc::{Dataset, KernelHyper, MomentGaussian, Priors};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

/// Test error of the 3-class MNIST subset run must stay below this. Frozen
/// from a pilot run of the same configuration (error 0.0168, NLL 0.078).
const MNIST_ERROR_THRESHOLD: f64 = 0.05;

type Outcome = Result<(bool, String), String>;

fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn converged_toy(mode: Mode) -> Result<(Dataset, EpEngine), String> {
    let data = synthetic(50, 1).map_err(err)?.dataset;
    let params = GpParams::initial(&data, 10, true, 1).map_err(err)?;
    let mut e = EpEngine::new(&data, params, mode).map_err(err)?;
    let conv = e.run_to_convergence(&data, 0.7, 1e-10, 20_000).map_err(err)?;
    if !conv.converged {
        return Err(format!("EP did not converge ({} passes)", conv.passes));
    }
    Ok((data, e))
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let reports = gradient_check(50, 10, 1, 0.0).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let ok = reports.iter().all(|r| r.passed) && secs < 60.0;
    Ok((
        ok,
        format!(
            "{:.1}% of coordinates within 1e-3, worst relative error {:.2e}, {secs:.1}s (limit 60s)",
            100.0 * reports[0].estimate,
            reports[1].estimate
        ),
    ))
}

fn moment_matching() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cavs: Vec<CavityConfig> = (0..100).map(|_| CavityConfig::random(&mut rng)).collect();
    let reports: Vec<_> = cavs
        .par_iter()
        .enumerate()
        .map(|(i, c)| check_tilted(c, 1_000_000, 1000 + i as u64, 4.0))
        .collect::<epgpc::Result<Vec<_>>>()
        .map_err(err)?
        .into_iter()
        .flatten()
        .collect();
    let failed = reports.iter().filter(|r| !r.passed).count();
    let worst = reports
        .iter()
        .map(|r| (r.estimate - r.target).abs() / r.standard_error.unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    Ok((
        failed == 0 && secs < 300.0,
        format!(
            "{failed}/{} quantities outside 4 SE over 100 cavities, worst {worst:.2} SE, {secs:.1}s (limit 300s)",
            reports.len()
        ),
    ))
}

fn dense_equivalence() -> Outcome {
    let mut worst_post: f64 = 0.0;
    let mut worst_obj: f64 = 0.0;
    for t in 0..50u64 {
        let mode = if t % 2 == 0 { Mode::Ep } else { Mode::Sep };
        let (data, e) = random_state(3000 + t, mode).map_err(err)?;
        let post: Vec<MomentGaussian> = e.posterior.classes.iter().map(|q| q.moments()).collect();
        let reference = dense_posterior(&data, &e.params, &e.sites).map_err(err)?;
        worst_post = worst_post.max(scaled_gap(&post, &reference));
        let lz = log_zq(&e, &data).map_err(err)?;
        let lz_ref = dense_log_zq(&data, &e.params, &e.sites).map_err(err)?;
        worst_obj = worst_obj.max(relative_error(lz, lz_ref, 1e-12));
    }
    Ok((
        worst_post <= 1e-7 && worst_obj <= 1e-7,
        format!("50 states (EP and SEP): posterior gap {worst_post:.2e}, log Z_q gap {worst_obj:.2e} (limit 1e-7)"),
    ))
}

fn sites_of(e: &EpEngine) -> Vec<[f64; 5]> {
    match &e.sites {
        SiteState::Full(s) => s.sites.iter().map(|p| p.to_array()).collect(),
        SiteState::Tied(_) => unreachable!("full EP"),
    }
}

fn stationarity() -> Outcome {
    let (data, e) = converged_toy(Mode::Ep)?;
    let all: Vec<usize> = (0..data.len()).collect();

    // One more undamped pass.
    let before = sites_of(&e);
    let mut next = e.clone();
    next.pass(&data, &all, 1.0).map_err(err)?;
    let after = sites_of(&next);
    let mut worst_move: f64 = 0.0;
    for (a, b) in before.iter().zip(&after) {
        for j in 0..4 {
            worst_move = worst_move.max((a[j] - b[j]).abs() / a[j].abs().max(1.0));
        }
    }

    let probe = ratio_test(&data, &e)?;
    // Control: the same test away from the fixed point must see linear terms.
    let mut early = EpEngine::new(&data, e.params.clone(), Mode::Ep).map_err(err)?;
    for _ in 0..5 {
        early.pass(&data, &all, 0.7).map_err(err)?;
    }
    let control = ratio_test(&data, &early)?;
    let linear_share = control.linear as f64 / control.coords as f64;
    Ok((
        worst_move < 1e-6 && probe.linear == 0 && probe.max_slope <= 1e-4 && linear_share > 0.5,
        format!(
            "extra pass moves sites by {worst_move:.2e} (limit 1e-6); {} site coordinates: {} linear, {} quadratic \
             ({} via δ=1e-2 because the 1e-4 change is at round-off), slope ≤ {:.1e}; control after 5 passes: \
             {:.0}% linear, slope ≤ {:.1e}",
            probe.coords,
            probe.linear,
            probe.quadratic,
            probe.fallback,
            probe.max_slope,
            100.0 * linear_share,
            control.max_slope
        ),
    ))
}

struct RatioTest {
    coords: usize,
    linear: usize,
    quadratic: usize,
    /// Coordinates decided by the 1e-2 / 1e-3 pair.
    fallback: usize,
    max_slope: f64,
}

/// Shift every natural parameter of every active site by δ = 1e-3 and 1e-4.
/// A quadratic response drops 100-fold, a linear one 10-fold. Where the
/// 1e-4 response is below round-off of `log Z_q`, the pair 1e-2 / 1e-3
/// decides instead.
fn ratio_test(data: &Dataset, e: &EpEngine) -> Result<RatioTest, String> {
    let base = log_zq(e, data).map_err(err)?;
    let noise = 1e-11 * base.abs().max(1.0);
    let shift = |idx: usize, j: usize, delta: f64| -> Result<f64, String> {
        let mut p = e.clone();
        if let SiteState::Full(s) = &mut p.sites {
            let mut a = s.sites[idx].to_array();
            a[j] += delta;
            s.sites[idx] = epgpc::SiteParams::from_array(a);
        }
        p.reconstruct(data).map_err(err)?;
        Ok((log_zq(&p, data).map_err(err)? - base).abs())
    };
    let sites = sites_of(e);
    let coords: Vec<(usize, usize)> = sites
        .iter()
        .enumerate()
        .filter(|(_, a)| a[..4].iter().any(|v| *v != 0.0))
        .flat_map(|(i, _)| (0..4).map(move |j| (i, j)))
        .collect();
    let responses: Vec<[f64; 3]> = coords
        .par_iter()
        .map(|&(i, j)| Ok([shift(i, j, 1e-2)?, shift(i, j, 1e-3)?, shift(i, j, 1e-4)?]))
        .collect::<Result<_, String>>()?;
    let mut out = RatioTest { coords: coords.len(), linear: 0, quadratic: 0, fallback: 0, max_slope: 0.0 };
    for [coarse, big, small] in responses {
        out.max_slope = out.max_slope.max(big / 1e-3);
        let ratio = if small > noise {
            big / small
        } else if big > noise {
            out.fallback += 1;
            coarse / big
        } else {
            out.fallback += 1;
            out.quadratic += 1;
            continue;
        };
        if ratio >= 50.0 {
            out.quadratic += 1;
        } else {
            out.linear += 1;
        }
    }
    Ok(out)
}

fn quadrature_inequality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_two: f64 = 0.0;
    for _ in 0..100 {
        let m: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let v: Vec<f64> = (0..2).map(|_| rng.random_range(0.05..3.0)).collect();
        let y = rng.random_range(0..2);
        worst_two = worst_two.max((exact_factor_quadrature(&m, &v, y) - product_approximation(&m, &v, y)).abs());
    }
    let mut violations = 0;
    let mut strict = 0;
    let cases = 1000;
    for _ in 0..cases {
        let c = rng.random_range(3..=5);
        let m: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let v: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..3.0)).collect();
        let y = rng.random_range(0..c);
        let exact = exact_factor_quadrature(&m, &v, y);
        let prod = product_approximation(&m, &v, y);
        if exact < prod - 1e-12 {
            violations += 1;
        }
        if exact > prod + 1e-12 {
            strict += 1;
        }
    }
    // Degenerate case: a class whose mean is far below every other one makes
    // its factor ≈ 1, so only one correlated pair is left.
    let degenerate = {
        let (m, v) = ([0.0, -60.0, 0.0], [1.0, 1.0, 1.0]);
        let e = exact_factor_quadrature(&m, &v, 0);
        let p = product_approximation(&m, &v, 0);
        (e - p).abs()
    };
    Ok((
        worst_two <= 1e-10 && violations == 0 && degenerate <= 1e-10,
        format!(
            "C=2 gap {worst_two:.1e} (limit 1e-10); {violations}/{cases} violations, {strict} strict; degenerate gap {degenerate:.1e}"
        ),
    ))
}

fn stochastic_identity() -> Outcome {
    let (data, e) = converged_toy(Mode::Ep)?;
    let full = grad_log_zq(&e, &data).map_err(err)?.values;
    let scale = full.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut partitions = 0;
    for parts in [1usize, 2, 5, 10, 50] {
        // Equal-size random partition: plain mean.
        let mut idx: Vec<usize> = (0..data.len()).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let size = data.len() / parts;
        let mut mean = vec![0.0; full.len()];
        for b in idx.chunks(size) {
            let g = stochastic_grad(&e, &data, b).map_err(err)?.values;
            mean.iter_mut().zip(&g).for_each(|(m, v)| *m += v / parts as f64);
        }
        worst = worst.max(full.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale);
        partitions += 1;
    }
    // Uneven partition: mean weighted by batch share.
    let cuts = [0usize, 3, 17, 18, 41, 50];
    let mut mean = vec![0.0; full.len()];
    for w in cuts.windows(2) {
        let b: Vec<usize> = (w[0]..w[1]).collect();
        let g = stochastic_grad(&e, &data, &b).map_err(err)?.values;
        let share = b.len() as f64 / data.len() as f64;
        mean.iter_mut().zip(&g).for_each(|(m, v)| *m += share * v);
    }
    worst = worst.max(full.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale);
    partitions += 1;
    Ok((worst <= 1e-10, format!("{partitions} partitions, largest gap {worst:.2e} (limit 1e-10)")))
}

fn wine() -> Outcome {
    let t = Instant::now();
    let opts = CsvOptions { label: LabelColumn::Name("class".into()), ..Default::default() };
    let data = load_csv(data_path("wine.csv"), &opts).map_err(err)?.dataset;
    if (data.len(), data.dim(), data.n_classes) != (178, 13, 3) {
        return Err(format!("unexpected wine shape {}×{}, {} classes", data.len(), data.dim(), data.n_classes));
    }
    let results: Vec<(f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|s| {
            let (train, test) = split(&data, 0.9, s, false).map_err(err)?;
            let (train, others, _) = standardize(&train, &[&test]).map_err(err)?;
            let cfg = TrainConfig {
                schedule: Schedule::EpInner,
                iterations: 250,
                n_inducing: (0.1 * train.len() as f64).round() as usize,
                seed: s,
                eval_every: 0,
                ..Default::default()
            };
            let fitted = fit(&train, None, &cfg, None, &mut |_| {}).map_err(err)?;
            let m = evaluate(&fitted.snapshot.predictor().map_err(err)?, &others[0]).map_err(err)?;
            Ok((m.error_rate, m.nll))
        })
        .collect::<Result<_, String>>()?;
    let errs: Vec<f64> = results.iter().map(|r| r.0).collect();
    let nlls: Vec<f64> = results.iter().map(|r| r.1).collect();
    let (me, mn) = (median(&errs), median(&nlls));
    let secs = t.elapsed().as_secs_f64();
    Ok((
        me <= 0.08 && mn <= 0.15 && secs < 600.0,
        format!("20 splits: median error {me:.4} (limit 0.08), median NLL {mn:.4} (limit 0.15), {secs:.1}s (limit 600s)"),
    ))
}

fn synthetic_boundary() -> Outcome {
    let s = synthetic(2000, 8).map_err(err)?;
    let train = s.dataset.subset(&(0..1000).collect::<Vec<_>>());
    let test_rows: Vec<usize> = (1000..2000).collect();
    let test = s.dataset.subset(&test_rows);
    let bayes = s.bayes_labels();
    let bayes_err = test_rows.iter().filter(|&&i| bayes[i] != s.dataset.y[i]).count() as f64 / test_rows.len() as f64;

    let init = GpParams::initial(&train, 64, true, 8).map_err(err)?;
    let params = GpParams::new(vec![s.hyper.clone()], init.inducing).map_err(err)?;
    let mut e = EpEngine::new(&train, params, Mode::Ep).map_err(err)?;
    // Parallel updates at this size need heavy damping to avoid a 2-cycle.
    let conv = e.run_to_convergence(&train, 0.3, 1e-6, 1000).map_err(err)?;
    let m = evaluate(&Predictor::from_engine(&e).map_err(err)?, &test).map_err(err)?;
    Ok((
        m.error_rate <= bayes_err + 0.05,
        format!(
            "test error {:.4}, Bayes error {bayes_err:.4} (limit +0.05); EP {} after {} passes (last site change {:.1e})",
            m.error_rate,
            if conv.converged { "converged" } else { "stopped" },
            conv.passes,
            conv.last.max_change
        ),
    ))
}

fn sep_parity() -> Outcome {
    let s = synthetic(400, 9).map_err(err)?;
    let train = s.dataset.subset(&(0..200).collect::<Vec<_>>());
    let test = s.dataset.subset(&(200..400).collect::<Vec<_>>());
    let nll = |mode: Mode| -> Result<f64, String> {
        let cfg = TrainConfig {
            schedule: Schedule::EpInner,
            mode,
            iterations: 100,
            n_inducing: 20,
            seed: 9,
            eval_every: 0,
            ..Default::default()
        };
        let f = fit(&train, None, &cfg, None, &mut |_| {}).map_err(err)?;
        Ok(evaluate(&f.snapshot.predictor().map_err(err)?, &test).map_err(err)?.nll)
    };
    let (ep, sep) = (nll(Mode::Ep)?, nll(Mode::Sep)?);

    let memory = |n: usize| -> Result<usize, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.5..2.5));
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let data = Dataset::new(x, y, 3).map_err(err)?;
        let params = GpParams::initial(&data, 20, true, 1).map_err(err)?;
        let mut e = EpEngine::new(&data, params, Mode::Sep).map_err(err)?;
        let rows: Vec<usize> = (0..200).collect();
        e.pass(&data, &rows, 1.0).map_err(err)?;
        Ok(e.memory_bytes())
    };
    let (small, large) = (memory(1000)?, memory(10_000)?);
    let growth = (large as f64 - small as f64).abs() / small as f64;
    Ok((
        (sep - ep).abs() <= 0.1 && growth < 0.05,
        format!(
            "NLL EP {ep:.4}, SEP {sep:.4}, gap {:.4} (limit 0.1); SEP state {small} B at N=1e3, {large} B at N=1e4, \
             growth {:.2}% (limit 5%)",
            (sep - ep).abs(),
            100.0 * growth
        ),
    ))
}

fn random_variational(rng: &mut ChaCha8Rng, priors: &Priors) -> VariationalState {
    let m = priors.classes[0].m();
    VariationalState {
        means: (0..priors.n_classes()).map(|_| DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0))).collect(),
        chol: (0..priors.n_classes())
            .map(|_| {
                DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
                    std::cmp::Ordering::Less => 0.0,
                    std::cmp::Ordering::Equal => rng.random_range(0.01..2.0),
                    std::cmp::Ordering::Greater => rng.random_range(-1.0..1.0),
                })
            })
            .collect(),
    }
}

fn vi_sanity() -> Outcome {
    let data = synthetic(50, 1).map_err(err)?.dataset;
    let cfg = TrainConfig {
        schedule: Schedule::EpInner,
        optimizer: Optimizer::Adam,
        iterations: 300,
        n_inducing: 10,
        seed: 1,
        eval_every: 0,
        record_time: false,
        ..Default::default()
    };
    let f = epgpc::trainer::fit_vi(&data, None, &cfg, None, &mut |_| {}).map_err(err)?;
    let first = f.trace[0].log_zq;
    let last = f.trace.last().map_or(first, |r| r.log_zq);
    let rises = last > first;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut min_kl = f64::INFINITY;
    for _ in 0..200 {
        let d = rng.random_range(1..=3);
        let c = rng.random_range(2..=4);
        let m = rng.random_range(1..=6);
        let h = KernelHyper::new(d, rng.random_range(0.3..2.0), rng.random_range(0.3..2.0), 0.1);
        let z = (0..c).map(|_| DMatrix::from_fn(m, d, |_, _| rng.random_range(-2.0..2.0))).collect();
        let priors = Priors::new(&GpParams::new(vec![h], z).map_err(err)?).map_err(err)?;
        let q = random_variational(&mut rng, &priors);
        min_kl = min_kl.min(kl(&q, &priors).into_iter().fold(f64::INFINITY, f64::min));
        min_kl = min_kl.min(kl(&VariationalState::from_prior(&priors), &priors).into_iter().fold(f64::INFINITY, f64::min));
    }

    // Jensen: E[log p(y|f)] ≤ log E[p(y|f)], with E[p] = ε/C + (1−ε)·P(win)
    // and P(win) from direct quadrature.
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for _ in 0..1000 {
        let c = rng.random_range(2..=5);
        let marg = Marginals {
            mean: (0..c).map(|_| rng.random_range(-3.0..3.0)).collect(),
            var: (0..c).map(|_| rng.random_range(0.01..3.0)).collect(),
        };
        let y = rng.random_range(0..c);
        let lhs = expected_log_lik(y, &marg, EPSILON, 64);
        let win = exact_factor_quadrature(&marg.mean, &marg.var, y);
        let rhs = (EPSILON / c as f64 + (1.0 - EPSILON) * win).ln();
        if lhs > rhs + 1e-9 {
            violations += 1;
        }
        tightest = tightest.min(rhs - lhs);
    }
    Ok((
        // KL of q = p evaluates to ±1 ulp.
        rises && min_kl >= -1e-12 && violations == 0,
        format!(
            "ELBO {first:.3} → {last:.3}; min KL {min_kl:.2e} over 200 states; Jensen {violations}/1000 violations \
             (smallest gap {tightest:.2e})"
        ),
    ))
}

fn mnist_subset() -> Outcome {
    let t = Instant::now();
    let opts = CsvOptions { label: LabelColumn::Name("label".into()), ..Default::default() };
    let data = load_csv(data_path("mnist012.csv.gz"), &opts).map_err(err)?.dataset;
    let train = data.subset(&(0..3000).collect::<Vec<_>>());
    let test = data.subset(&(3000..data.len()).collect::<Vec<_>>());
    let epochs = 30;
    let batch = 200;
    let cfg = TrainConfig {
        schedule: Schedule::Minibatch,
        mode: Mode::Sep,
        optimizer: Optimizer::Adam,
        iterations: epochs,
        batch_size: Some(batch),
        n_inducing: 50,
        seed: 1,
        eval_every: 0,
        trace_objective: TraceObjective::Full,
        ..Default::default()
    };
    let f = fit(&train, Some(&test), &cfg, None, &mut |_| {}).map_err(err)?;
    let per = train.len().div_ceil(batch);
    let medians: Vec<f64> = (0..epochs).map(|e| median(&f.trace[1 + e * per..1 + (e + 1) * per].iter().map(|r| r.log_zq).collect::<Vec<_>>())).collect();
    let drops = medians.windows(2).filter(|w| w[1] < w[0]).count();
    let m = evaluate(&f.snapshot.predictor().map_err(err)?, &test).map_err(err)?;
    Ok((
        drops == 0 && m.error_rate < MNIST_ERROR_THRESHOLD,
        format!(
            "epoch medians {:.1} → {:.1} with {drops} decreases; test error {:.4} (threshold {MNIST_ERROR_THRESHOLD}), \
             NLL {:.4}, {:.1}s",
            medians[0],
            medians[epochs - 1],
            m.error_rate,
            m.nll,
            t.elapsed().as_secs_f64()
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient correctness", gradient_correctness),
        ("moment matching vs Monte Carlo", moment_matching),
        ("dense posterior and objective", dense_equivalence),
        ("fixed-point stationarity", stationarity),
        ("exact factor vs product", quadrature_inequality),
        ("stochastic gradient identity", stochastic_identity),
        ("wine reproduction", wine),
        ("synthetic boundary quality", synthetic_boundary),
        ("SEP parity and memory", sep_parity),
        ("VI baseline sanity", vi_sanity),
        ("MNIST 0-2 minibatch run", mnist_subset),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("EPGPC_ACCEPT").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let (ok, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!("{} criterion {n:>2} ({name}): {detail}", if ok { "PASS" } else { "FAIL" });
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
