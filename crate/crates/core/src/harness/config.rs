//! Flat `key = value` experiment files.
//!
//! ```text
//! # comments run to end of line
//! mode = odsgd
//! cluster.workers = 4
//! timing.t_cop = 3          # or one value per worker: 3,3,4,5
//! local.optimizer = dcasgd-a
//! ```
//!
//! Unknown or repeated keys are rejected so typos do not silently fall back
//! to defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cluster::{Mode, UpdaterConfig};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::optim::{HyperParams, LrKind, LrSchedule, UpdaterKind};
use crate::simnet::TimingModel;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        n: usize,
        n_test: usize,
        d: usize,
        k: usize,
        separation: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WarmUp {
    Iters(u64),
    Epochs(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelChoice {
    Softmax,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub workers: usize,
    pub devices: usize,
    pub batch: usize,
    pub epochs: u64,
    pub max_iters: Option<u64>,
    pub wp: WarmUp,
    pub seed: u64,
    pub model: ModelChoice,
    pub data: DataSource,
    pub global: UpdaterConfig,
    pub local: UpdaterConfig,
    pub timing: TimingModel,
    pub metrics_out: Option<PathBuf>,
    pub trace_out: Option<PathBuf>,
    pub smoothing_window: usize,
    pub smoothing_start: usize,
}

impl ExperimentConfig {
    pub fn model_spec(&self, d: usize, k: usize) -> ModelSpec {
        match self.model {
            ModelChoice::Softmax => ModelSpec::softmax(d, k),
            ModelChoice::Mlp { hidden } => ModelSpec::mlp(d, hidden, k),
        }
    }

    /// The same experiment in another mode, with no output files; used for
    /// baseline runs.
    pub fn baseline(&self, mode: Mode) -> Self {
        let mut c = self.clone();
        c.mode = mode;
        c.global.kind = mode.server_updater();
        c.metrics_out = None;
        c.trace_out = None;
        c
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::config_field("config", format!("{}: {e}", path.as_ref().display()))
        })?;
        Self::parse(&text, overrides)
    }

    /// Parses `text`, then applies `overrides` as if they were extra lines.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut raw = Raw::parse(text)?;
        for (k, v) in overrides {
            raw.entries.insert(k.clone(), v.clone());
        }
        let cfg = build(&mut raw)?;
        if let Some(key) = raw.entries.keys().next() {
            return Err(Error::config_field(key.clone(), "unknown key"));
        }
        Ok(cfg)
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, &[])
    }
}

struct Raw {
    entries: BTreeMap<String, String>,
}

impl Raw {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::config_field(
                    k,
                    format!("repeated on line {}", i + 1),
                ));
            }
        }
        Ok(Raw { entries })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config_field(key, format!("cannot parse `{v}`"))),
        }
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| Error::config_field(key, format!("cannot parse list `{v}`"))),
        }
    }

    fn path(&mut self, key: &str, must_exist: bool) -> Result<Option<PathBuf>> {
        let Some(v) = self.entries.remove(key) else {
            return Ok(None);
        };
        let p = PathBuf::from(v);
        if must_exist && !p.is_file() {
            return Err(Error::config_field(
                key,
                format!("{} does not exist", p.display()),
            ));
        }
        Ok(Some(p))
    }
}

fn updater(
    raw: &mut Raw,
    prefix: &str,
    kind: UpdaterKind,
    default_lr: f64,
) -> Result<UpdaterConfig> {
    let key = |k: &str| format!("{prefix}.{k}");
    let lr: f64 = raw.get(&key("lr"), default_lr)?;
    let defaults = HyperParams::default();
    let hp = HyperParams {
        eta: lr,
        lambda: raw.get(&key("lambda"), defaults.lambda)?,
        ms_decay: raw.get(&key("ms_decay"), defaults.ms_decay)?,
        momentum: raw.get(&key("momentum"), defaults.momentum)?,
        weight_decay: raw.get(&key("weight_decay"), defaults.weight_decay)?,
        epsilon: raw.get(&key("epsilon"), defaults.epsilon)?,
    };
    let schedule: String = raw.get(&key("schedule"), "constant".to_string())?;
    let lr_kind = match schedule.as_str() {
        "constant" => LrKind::Constant,
        "step" => LrKind::StepDecay {
            milestones: raw.list(&key("milestones"))?.unwrap_or_default(),
            factor: raw.get(&key("factor"), 0.1)?,
        },
        "poly" | "polynomial" => LrKind::Polynomial {
            power: raw.get(&key("power"), 2.0)?,
            total_iters: raw.take(&key("total_iters"))?,
        },
        "warmup" => LrKind::LinearWarmup {
            start: raw.get(&key("warmup_start"), 0.0)?,
            wp_epochs: raw.get(&key("warmup_epochs"), 5.0)?,
            then: Box::new(
                match raw.get(&key("after"), "constant".to_string())?.as_str() {
                    "constant" => LrKind::Constant,
                    "poly" | "polynomial" => LrKind::Polynomial {
                        power: raw.get(&key("power"), 2.0)?,
                        total_iters: raw.take(&key("total_iters"))?,
                    },
                    "step" => LrKind::StepDecay {
                        milestones: raw.list(&key("milestones"))?.unwrap_or_default(),
                        factor: raw.get(&key("factor"), 0.1)?,
                    },
                    other => {
                        return Err(Error::config_field(
                            key("after"),
                            format!("unknown schedule `{other}`"),
                        ))
                    }
                },
            ),
        },
        other => {
            return Err(Error::config_field(
                key("schedule"),
                format!("unknown schedule `{other}`"),
            ))
        }
    };
    let lr = LrSchedule::new(lr, lr_kind).map_err(|e| prefix_field(e, prefix))?;
    hp.validate().map_err(|e| prefix_field(e, prefix))?;
    Ok(UpdaterConfig { kind, hp, lr })
}

/// Rewrites a bare field name like `eta` into `global.eta`.
fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config {
            field: Some(f),
            message,
        } => {
            let f = match f.strip_prefix("lr.") {
                Some("base") => "lr".to_string(),
                Some(rest) => rest.to_string(),
                None => f,
            };
            Error::config_field(format!("{prefix}.{f}"), message)
        }
        other => other,
    }
}

fn build(raw: &mut Raw) -> Result<ExperimentConfig> {
    let mode: Mode = raw.get("mode", Mode::Ssgd)?;
    let workers: usize = raw.get("cluster.workers", 4)?;
    let devices = raw.get("cluster.devices", 1)?;
    let batch = raw.get("train.batch", 16)?;
    let epochs = raw.get("train.epochs", 10)?;
    let max_iters = raw.take("train.iters")?;
    let wp = match (
        raw.take::<u64>("train.wp")?,
        raw.take::<f64>("train.wp_epochs")?,
    ) {
        (Some(_), Some(_)) => {
            return Err(Error::config_field(
                "train.wp",
                "set either train.wp or train.wp_epochs",
            ))
        }
        (_, Some(e)) if !(e >= 0.0 && e.is_finite()) => {
            return Err(Error::config_field("train.wp_epochs", "must be >= 0"))
        }
        (_, Some(e)) => WarmUp::Epochs(e),
        (w, None) => WarmUp::Iters(w.unwrap_or(0)),
    };
    let seed = raw.get("seed", 0)?;

    let model = match raw.get("model.kind", "softmax".to_string())?.as_str() {
        "softmax" => ModelChoice::Softmax,
        "mlp" | "mlp1" => ModelChoice::Mlp {
            hidden: raw.get("model.hidden", 32)?,
        },
        other => {
            return Err(Error::config_field(
                "model.kind",
                format!("unknown model `{other}`"),
            ))
        }
    };

    let data = match raw.get("data.source", "synthetic".to_string())?.as_str() {
        "synthetic" => DataSource::Synthetic {
            n: raw.get("data.n", 2000)?,
            n_test: raw.get("data.n_test", 500)?,
            d: raw.get("data.d", 20)?,
            k: raw.get("data.k", 4)?,
            separation: raw.get("data.separation", 3.0)?,
        },
        "idx" => {
            let train_images = raw
                .path("data.train_images", true)?
                .ok_or_else(|| Error::config_field("data.train_images", "required for idx data"))?;
            let train_labels = raw
                .path("data.train_labels", true)?
                .ok_or_else(|| Error::config_field("data.train_labels", "required for idx data"))?;
            let test_images = raw.path("data.test_images", true)?;
            let test_labels = raw.path("data.test_labels", true)?;
            if test_images.is_some() != test_labels.is_some() {
                return Err(Error::config_field(
                    "data.test_labels",
                    "test images and labels must be given together",
                ));
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            }
        }
        other => {
            return Err(Error::config_field(
                "data.source",
                format!("unknown source `{other}`"),
            ))
        }
    };

    let global_lr = raw.get("global.lr", 0.1)?;
    let global = updater(raw, "global", mode.server_updater(), global_lr)?;
    let local_kind = raw.get("local.optimizer", UpdaterKind::Sgd)?;
    let local = updater(raw, "local", local_kind, global_lr)?;

    let t_cop = raw.list("timing.t_cop")?.unwrap_or_else(|| vec![1.0]);
    let t_cop = match t_cop.len() {
        1 => vec![t_cop[0]; workers],
        n if n == workers => t_cop,
        n => {
            return Err(Error::config_field(
                "timing.t_cop",
                format!("{n} values for {workers} workers"),
            ))
        }
    };
    let t_com = raw.get("timing.t_com", 0.0)?;
    let timing = TimingModel {
        t_cop,
        t_com,
        t_com_prime: raw.get("timing.t_com_prime", t_com)?,
        local_update_cost: raw.get("timing.local_update_cost", 0.0)?,
        server_update_cost: raw.get("timing.server_update_cost", 0.0)?,
    };
    timing.validate()?;

    let smoothing_window = raw.get("smoothing.window", 1)?;
    let smoothing_start = raw.get("smoothing.start", 0)?;
    super::check_smoothing(smoothing_window, smoothing_start)
        .map_err(|e| prefix_field(e, "smoothing"))?;

    Ok(ExperimentConfig {
        mode,
        workers,
        devices,
        batch,
        epochs,
        max_iters,
        wp,
        seed,
        model,
        data,
        global,
        local,
        timing,
        metrics_out: raw.path("output.metrics", false)?,
        trace_out: raw.path("output.trace", false)?,
        smoothing_window,
        smoothing_start,
    })
}
