//! Experiment runner: configuration, data loading, metrics files, smoothing
//! and run comparison.

pub mod config;
pub mod metrics;

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::cluster::{run_training, write_trace, Mode, RunConfig, RunSummary};
use crate::error::{Error, Result};
use crate::model::{gen_synthetic, load_idx, Dataset};
use crate::simnet::{gr_rate, imp_rate_parts, t_new, t_org};

pub use config::{DataSource, ExperimentConfig, ModelChoice, WarmUp};
pub use metrics::{
    read_metrics, read_metrics_file, write_metrics, write_metrics_file, MetricsRow, METRICS_HEADER,
};

pub(crate) fn check_smoothing(window: usize, start: usize) -> Result<()> {
    if window.is_multiple_of(2) {
        return Err(Error::config_field(
            "window",
            format!("window {window} must be odd"),
        ));
    }
    if start < window / 2 {
        return Err(Error::config_field(
            "start",
            format!("start {start} is less than half the window {window}"),
        ));
    }
    Ok(())
}

/// Centered moving average from `start` on; earlier points are copied.
/// Near the end the window shrinks to the points that exist.
pub fn smooth_moving_average(series: &[f64], window: usize, start: usize) -> Result<Vec<f64>> {
    check_smoothing(window, start)?;
    let half = window / 2;
    Ok((0..series.len())
        .map(|i| {
            if i < start {
                return series[i];
            }
            let lo = i - half;
            let hi = (i + half + 1).min(series.len());
            series[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect())
}

/// Loads train and test sets.
pub fn load_data(source: &DataSource, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    match source {
        DataSource::Synthetic {
            n,
            n_test,
            d,
            k,
            separation,
        } => {
            let all = gen_synthetic(seed, n + n_test, *d, *k, *separation)?;
            if *n_test == 0 {
                return Ok((all, None));
            }
            let (train, test) = all.split_at(*n)?;
            Ok((train, Some(test)))
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l)?),
                _ => None,
            };
            Ok((train, test))
        }
    }
}

/// Builds the cluster configuration for data of shape `(n, d, k)`.
pub fn run_config(cfg: &ExperimentConfig, n: usize, d: usize, k: usize) -> Result<RunConfig> {
    let ipe = (n / (cfg.workers * cfg.batch).max(1)) as u64;
    let wp = match cfg.wp {
        WarmUp::Iters(w) => w,
        WarmUp::Epochs(e) => (e * ipe as f64).round() as u64,
    };
    let rc = RunConfig {
        mode: cfg.mode,
        workers: cfg.workers,
        devices: cfg.devices,
        batch: cfg.batch,
        epochs: cfg.epochs,
        max_iters: cfg.max_iters,
        wp,
        seed: cfg.seed,
        model: cfg.model_spec(d, k),
        global: cfg.global.clone(),
        local: cfg.local.clone(),
        timing: cfg.timing.clone(),
        record_trace: cfg.trace_out.is_some(),
        record_params: false,
        evaluate: true,
    };
    rc.validate()?;
    Ok(rc)
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub mode: Mode,
    pub run: RunSummary,
    pub final_train_acc: Option<f64>,
    pub final_test_acc: Option<f64>,
    /// Samples per unit of simulated time over the whole run.
    pub throughput: f64,
    pub measured_iter_time: Option<f64>,
    /// Closed-form iteration time for synchronous modes. Update costs are
    /// not part of the formula.
    pub predicted_iter_time: Option<f64>,
}

impl ExperimentSummary {
    /// Measured `(T_base − T_self) / T_base` against `baseline`.
    pub fn imp_rate_vs(&self, baseline: &ExperimentSummary) -> Option<f64> {
        let (base, own) = (baseline.measured_iter_time?, self.measured_iter_time?);
        (base > 0.0).then(|| (base - own) / base)
    }

    pub fn gr_rate_vs(&self, baseline: &ExperimentSummary) -> Result<f64> {
        gr_rate(self.throughput, baseline.throughput)
    }

    pub fn describe(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "mode            {}", self.mode);
        let _ = writeln!(s, "iterations      {}", self.run.total_iters);
        let _ = writeln!(s, "sim_time        {}", self.run.sim_time);
        let _ = writeln!(s, "throughput      {:.4}", self.throughput);
        let _ = writeln!(s, "iter_time       {}", opt(self.measured_iter_time));
        let _ = writeln!(s, "predicted       {}", opt(self.predicted_iter_time));
        let _ = writeln!(s, "train_acc       {}", opt(self.final_train_acc));
        let _ = writeln!(s, "test_acc        {}", opt(self.final_test_acc));
        let _ = writeln!(s, "mean_staleness  {:.4}", self.run.mean_staleness());
        s
    }
}

/// Runs one configured experiment and writes its output files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    let (train, test) = load_data(&cfg.data, cfg.seed)?;
    let k = test.as_ref().map_or(train.k(), |t| t.k().max(train.k()));
    let rc = run_config(cfg, train.n(), train.d(), k)?;
    let summary = summarize(&rc, run_training(&rc, &train, test.as_ref())?)?;

    if let Some(path) = &cfg.metrics_out {
        write_metrics_file(&summary.run.metrics, path)?;
    }
    if let Some(path) = &cfg.trace_out {
        write_trace(&summary.run.trace, BufWriter::new(File::create(path)?))?;
    }
    Ok(summary)
}

pub fn summarize(rc: &RunConfig, run: RunSummary) -> Result<ExperimentSummary> {
    let last = run.metrics.last();
    let t_cop = rc.timing.t_cop_max();
    let steady = rc.mode == Mode::OdSgd && rc.wp + 1 < run.total_iters;
    let predicted = match rc.mode {
        Mode::OdSgd if steady => Some(t_new(t_cop, rc.timing.t_com)),
        Mode::Ssgd | Mode::OdSgd => Some(t_org(t_cop, rc.timing.t_com_prime)),
        _ => None,
    };
    Ok(ExperimentSummary {
        mode: rc.mode,
        final_train_acc: last.map(|m| m.train_acc),
        final_test_acc: last.and_then(|m| m.test_acc),
        throughput: run.throughput(rc.batch)?,
        measured_iter_time: run.measured_iter_time(rc),
        predicted_iter_time: predicted,
        run,
    })
}

/// Runs `cfg` and the same experiment under `baseline`.
pub fn run_with_baseline(
    cfg: &ExperimentConfig,
    baseline: Mode,
) -> Result<(ExperimentSummary, ExperimentSummary)> {
    let own = run_experiment(cfg)?;
    let base = run_experiment(&cfg.baseline(baseline))?;
    Ok((own, base))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reconciliation {
    pub t_org_measured: f64,
    pub t_new_measured: f64,
    pub imp_measured: f64,
    pub imp_predicted: f64,
}

/// Runs `rc` as SSGD and as OD-SGD on the same timing model and compares
/// the measured improvement with the closed form.
pub fn reconcile(rc: &RunConfig, train: &Dataset) -> Result<Reconciliation> {
    let mut ssgd = rc.clone();
    ssgd.mode = Mode::Ssgd;
    let mut od = rc.clone();
    od.mode = Mode::OdSgd;
    let a = run_training(&ssgd, train, None)?;
    let b = run_training(&od, train, None)?;
    let missing = || Error::protocol("run too short to measure a steady iteration time");
    let t_org_measured = a.measured_iter_time(&ssgd).ok_or_else(missing)?;
    let t_new_measured = b.measured_iter_time(&od).ok_or_else(missing)?;
    if t_org_measured <= 0.0 {
        return Err(Error::config("baseline iteration time is zero"));
    }
    Ok(Reconciliation {
        t_org_measured,
        t_new_measured,
        imp_measured: (t_org_measured - t_new_measured) / t_org_measured,
        imp_predicted: imp_rate_parts(
            rc.timing.t_cop_max(),
            rc.timing.t_com,
            rc.timing.t_com_prime,
        )?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub baseline: bool,
    pub final_test_acc: Option<f64>,
    pub throughput: f64,
    pub gr_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub window: usize,
    pub start: usize,
    pub rows: Vec<ComparisonRow>,
}

/// Final smoothed test accuracy and final throughput of a run.
fn final_values(rows: &[MetricsRow], window: usize, start: usize) -> Result<(Option<f64>, f64)> {
    let last = rows
        .last()
        .ok_or_else(|| Error::format("metrics file has no rows"))?;
    let acc = if rows.iter().all(|r| r.test_acc.is_some()) {
        let series: Vec<f64> = rows
            .iter()
            .map(|r| r.test_acc.unwrap_or(f64::NAN))
            .collect();
        smooth_moving_average(&series, window, start)?
            .last()
            .copied()
    } else {
        None
    };
    Ok((acc, last.throughput))
}

/// Compares already-loaded runs; `runs[0]` is the baseline.
pub fn compare_rows(
    runs: &[(String, Vec<MetricsRow>)],
    window: usize,
    start: usize,
) -> Result<Comparison> {
    check_smoothing(window, start)?;
    let (_, base_rows) = runs
        .first()
        .ok_or_else(|| Error::config("nothing to compare"))?;
    let (_, base_speed) = final_values(base_rows, window, start)?;
    let rows = runs
        .iter()
        .enumerate()
        .map(|(i, (name, rows))| {
            let (acc, speed) = final_values(rows, window, start)?;
            Ok(ComparisonRow {
                name: name.clone(),
                baseline: i == 0,
                final_test_acc: acc,
                throughput: speed,
                gr_rate: gr_rate(speed, base_speed)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Comparison {
        window,
        start,
        rows,
    })
}

/// Loads metrics files and compares them against `baseline`.
pub fn compare_runs(
    baseline: &Path,
    others: &[PathBuf],
    window: usize,
    start: usize,
) -> Result<Comparison> {
    let load = |p: &Path| -> Result<(String, Vec<MetricsRow>)> {
        let rows = read_metrics_file(p).map_err(|e| match e {
            Error::Format { line, message } => Error::Format {
                line,
                message: format!("{}: {message}", p.display()),
            },
            other => other,
        })?;
        Ok((p.display().to_string(), rows))
    };
    let mut runs = vec![load(baseline)?];
    for p in others {
        runs.push(load(p)?);
    }
    compare_rows(&runs, window, start)
}

impl Comparison {
    pub fn render_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(3)
            .max(3);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# test_acc: centered moving average, window {} from index {}; the last points average what remains",
            self.window, self.start
        );
        let _ = writeln!(
            s,
            "{:<name_w$}  {:>8}  {:>10}  {:>12}  {:>9}",
            "run", "baseline", "test_acc", "throughput", "gr_rate%"
        );
        for r in &self.rows {
            let acc = r
                .final_test_acc
                .map_or("-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                s,
                "{:<name_w$}  {:>8}  {:>10}  {:>12.4}  {:>9.2}",
                r.name,
                if r.baseline { "*" } else { "" },
                acc,
                r.throughput,
                r.gr_rate
            );
        }
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("run,baseline,final_test_acc,throughput,gr_rate\n");
        for r in &self.rows {
            let acc = r.final_test_acc.map_or(String::new(), |a| a.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.name, r.baseline, acc, r.throughput, r.gr_rate
            );
        }
        s
    }
}
