use crate::manifest::{beside, Recorder};
use crate::options::{csv_options, Method, TrainOptions};
use crate::{ChecksFailed, UsageError};
use anyhow::{Context, Result};
use clap::Args;
use epgpc::data::{load_csv, load_features, standardize, synthetic, LabelPolicy};
use epgpc::oracles::{run_checks, CheckConfig};
use epgpc::predict::metrics;
use epgpc::snapshot::ModelSnapshot;
use epgpc::trainer::{fit, fit_vi, TraceRecord};
use serde_json::json;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Args)]
pub struct TrainArgs {
    /// TOML file with any of the flags below (snake_case keys); flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOptions,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Model snapshot.
    #[arg(long)]
    model: PathBuf,
    /// Labelled data (CSV).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    label_col: Option<String>,
    #[arg(long)]
    delimiter: Option<char>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Inputs (CSV with a header row).
    #[arg(long)]
    data: PathBuf,
    /// Column to drop before predicting, if the file carries labels.
    #[arg(long)]
    label_col: Option<String>,
    #[arg(long)]
    delimiter: Option<char>,
    /// Output CSV (standard output if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Features and labels (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Extra points from the same latent functions, written to `--test-out`.
    #[arg(long, default_value_t = 0, requires = "test_out")]
    test_n: usize,
    #[arg(long, requires = "test_n")]
    test_out: Option<PathBuf>,
    /// Generating latents, noise-free latents and Bayes labels of every row
    /// (training rows first), as CSV.
    #[arg(long)]
    latents: Option<PathBuf>,
}

#[derive(Args)]
pub struct CheckArgs {
    /// Reduced sample counts and case numbers.
    #[arg(long)]
    quick: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Scale the analytic gradient by `1 + perturb` (the gradient check must
    /// then fail).
    #[arg(long, hide = true, default_value_t = 0.0)]
    perturb: f64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "iteration,seconds,log_zq,test_error,test_nll")?;
    for r in trace {
        writeln!(w, "{},{},{},{},{}", r.iteration, r.seconds, r.log_zq, opt(r.test_error), opt(r.test_nll))?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(args: TrainArgs, manifest: Option<PathBuf>) -> Result<()> {
    let mut rec = Recorder::start("train");
    let opts = match &args.config {
        Some(p) => {
            rec.input(p)?;
            args.opts.over(TrainOptions::from_file(p)?)
        }
        None => args.opts,
    };
    let data_path = opts.data.clone().ok_or_else(|| UsageError("--data is required".into()))?;
    let out = opts.out.clone().ok_or_else(|| UsageError("--out is required".into()))?;
    let csv = opts.csv()?;

    rec.input(&data_path)?;
    let loaded = load_csv(&data_path, &csv).with_context(|| format!("loading {}", data_path.display()))?;
    let class_names = loaded.class_names;
    let feature_names = loaded.dataset.feature_names.clone();
    let mut train = loaded.dataset;
    let mut test = match &opts.test_data {
        Some(p) => {
            rec.input(p)?;
            let o = epgpc::data::CsvOptions { labels: LabelPolicy::Fixed(class_names.clone()), ..csv.clone() };
            Some(load_csv(p, &o).with_context(|| format!("loading {}", p.display()))?.dataset)
        }
        None => None,
    };
    let standardizer = if opts.standardize() {
        let others: Vec<&epgpc::Dataset> = test.iter().collect();
        let (t, rest, s) = standardize(&train, &others)?;
        train = t;
        test = rest.into_iter().next();
        Some(s)
    } else {
        None
    };

    let cfg = opts.train_config();
    let mut note = |r: &TraceRecord| {
        if let Some(n) = &r.note {
            eprintln!("note: record {}: {n}", r.iteration);
        }
    };
    let fitted = match opts.method() {
        Method::Vi => fit_vi(&train, test.as_ref(), &cfg, None, &mut note)?,
        Method::Ep | Method::Sep => fit(&train, test.as_ref(), &cfg, None, &mut note)?,
    };
    let mut snapshot = fitted.snapshot;
    snapshot.standardizer = standardizer;
    snapshot.class_names = class_names;
    snapshot.feature_names = feature_names;
    snapshot.save(&out).with_context(|| format!("writing snapshot {}", out.display()))?;
    rec.output(&out);
    if let Some(t) = &opts.trace {
        write_trace(t, &fitted.trace)?;
        rec.output(t);
    }

    let last = fitted.trace.last();
    println!(
        "{}",
        json!({
            "event": "trained",
            "method": opts.method(),
            "records": fitted.trace.len(),
            "objective": last.map(|r| r.log_zq),
            "test_error": last.and_then(|r| r.test_error),
            "test_nll": last.and_then(|r| r.test_nll),
            "snapshot": out,
        })
    );
    let manifest_path = manifest.unwrap_or_else(|| beside(&out));
    let config = json!({ "options": opts, "train_config": cfg });
    rec.finish(config, Some(cfg.seed)).write(&manifest_path)
}

pub fn eval(args: EvalArgs, manifest: Option<PathBuf>) -> Result<()> {
    let mut rec = Recorder::start("eval");
    rec.input(&args.model)?;
    rec.input(&args.data)?;
    let snapshot = ModelSnapshot::load(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let csv = epgpc::data::CsvOptions {
        labels: LabelPolicy::Fixed(snapshot.class_names.clone()),
        ..csv_options(args.label_col.as_deref(), args.delimiter)?
    };
    let data = load_csv(&args.data, &csv).with_context(|| format!("loading {}", args.data.display()))?.dataset;
    let probs = snapshot.probabilities(&data.x)?;
    let m = metrics(&probs, &data.y)?;
    println!("{}", json!({ "metric": "error_rate", "value": m.error_rate, "n": data.len() }));
    println!("{}", json!({ "metric": "nll", "value": m.nll, "n": data.len() }));
    if let Some(p) = manifest {
        let config = json!({ "model": args.model, "data": args.data, "label_col": args.label_col });
        rec.finish(config, Some(snapshot.seed)).write(&p)?;
    }
    Ok(())
}

pub fn predict(args: PredictArgs, manifest: Option<PathBuf>) -> Result<()> {
    let mut rec = Recorder::start("predict");
    rec.input(&args.model)?;
    rec.input(&args.data)?;
    let snapshot = ModelSnapshot::load(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let x = match &args.label_col {
        Some(_) => {
            let csv = csv_options(args.label_col.as_deref(), args.delimiter)?;
            load_csv(&args.data, &csv)?.dataset.x
        }
        None => load_features(&args.data, csv_options(None, args.delimiter)?.delimiter, true)?.0,
    };
    let probs = snapshot.probabilities(&x)?;

    let mut w: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let header: Vec<String> = snapshot.class_names.iter().map(|c| format!("p_{c}")).collect();
    writeln!(w, "{},predicted", header.join(","))?;
    for row in probs.row_iter() {
        let cells: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        let best = row.transpose().argmax().0;
        writeln!(w, "{},{}", cells.join(","), snapshot.class_names[best])?;
    }
    w.flush()?;
    drop(w);

    let target = match (&manifest, &args.out) {
        (Some(m), _) => Some(m.clone()),
        (None, Some(o)) => Some(beside(o)),
        (None, None) => None,
    };
    if let Some(t) = target {
        if let Some(o) = &args.out {
            rec.output(o);
        }
        let config = json!({ "model": args.model, "data": args.data, "label_col": args.label_col });
        rec.finish(config, Some(snapshot.seed)).write(&t)?;
    }
    Ok(())
}

fn write_points(path: &Path, s: &epgpc::data::Synthetic, rows: std::ops::Range<usize>) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "x0,x1,label")?;
    for i in rows {
        writeln!(w, "{},{},{}", s.dataset.x[(i, 0)], s.dataset.x[(i, 1)], s.dataset.y[i])?;
    }
    w.flush()?;
    Ok(())
}

pub fn synth(args: SynthArgs, manifest: Option<PathBuf>) -> Result<()> {
    let mut rec = Recorder::start("synth");
    let total = args.n + args.test_n;
    let s = synthetic(total, args.seed)?;
    write_points(&args.out, &s, 0..args.n)?;
    rec.output(&args.out);
    if let Some(p) = &args.test_out {
        write_points(p, &s, args.n..total)?;
        rec.output(p);
    }
    if let Some(p) = &args.latents {
        let bayes = s.bayes_labels();
        let mut w = create(p)?;
        writeln!(w, "f0,f1,f2,clean0,clean1,clean2,bayes_label")?;
        for i in 0..total {
            let f = s.latents.row(i);
            let c = s.clean.row(i);
            writeln!(w, "{},{},{},{},{},{},{}", f[0], f[1], f[2], c[0], c[1], c[2], bayes[i])?;
        }
        w.flush()?;
        rec.output(p);
    }
    let config = json!({ "n": args.n, "test_n": args.test_n, "seed": args.seed });
    rec.finish(config, Some(args.seed)).write(&manifest.unwrap_or_else(|| beside(&args.out)))
}

pub fn check(args: CheckArgs, manifest: Option<PathBuf>) -> Result<()> {
    let rec = Recorder::start("check");
    let mut cfg = if args.quick { CheckConfig::quick() } else { CheckConfig::full() };
    cfg.perturb = args.perturb;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let reports = run_checks(&cfg)?;
    let mut failed = 0;
    for r in &reports {
        if !r.passed {
            failed += 1;
        }
        println!(
            "{} {}: {:.6e} (target {:.6e}, tolerance {:.1e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.estimate,
            r.target,
            r.tolerance
        );
    }
    if let Some(p) = manifest {
        let config = json!({
            "quick": args.quick,
            "mc_samples": cfg.mc_samples,
            "tilted_cases": cfg.tilted_cases,
            "factor_cases": cfg.factor_cases,
            "dense_cases": cfg.dense_cases,
            "perturb": cfg.perturb,
        });
        rec.finish(config, Some(cfg.seed)).write(&p)?;
    }
    if failed > 0 {
        return Err(ChecksFailed(failed).into());
    }
    Ok(())
}
