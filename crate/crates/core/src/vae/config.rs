//! Flat `key = value` run configuration. Sections are dotted key prefixes;
//! `#` starts a comment.
//!
//! ```text
//! estimator.kind = GST
//! estimator.tau = 0.5
//! estimator.gap = 1.0
//! train.seeds = 0,1,2
//! data.source = synthetic
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use super::optim::TemperatureSchedule;
use super::VaeError;
use crate::estimators::{EstimatorConfig, EstimatorKind, Gap, Mode};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DatasetSpec {
    /// IDX files in `dir` (falls back to `$GST_DATA_DIR`).
    Mnist {
        dir: Option<PathBuf>,
        limit: Option<usize>,
    },
    Synthetic {
        n: usize,
        patterns: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub estimator: EstimatorConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    pub schedule: TemperatureSchedule,
    pub dataset: DatasetSpec,
    pub binarize: bool,
    pub hidden_enc: usize,
    pub hidden_dec: usize,
    /// Gradient-variance resamples at the end of each epoch (0 disables).
    pub variance_resamples: usize,
    pub variance_batch: usize,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub ablation_estimators: Vec<String>,
    pub ablation_taus: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::gst(Gap::Const(1.0), 0.5),
            batch_size: 100,
            epochs: 5,
            learning_rate: 1e-3,
            seeds: vec![0, 1, 2],
            schedule: TemperatureSchedule::Constant(0.5),
            dataset: DatasetSpec::Synthetic {
                n: 10_000,
                patterns: 40,
                seed: 0,
            },
            binarize: false,
            hidden_enc: 256,
            hidden_dec: 256,
            variance_resamples: 0,
            variance_batch: 8,
            checkpoint_every: 0,
            ablation_estimators: ["ST", "NZ-GST-0.0", "NZ-GST-1.0", "GST-0.0", "GST-1.0"]
                .map(String::from)
                .to_vec(),
            ablation_taus: vec![0.5],
        }
    }
}

const KEYS: &[&str] = &[
    "estimator.kind",
    "estimator.tau",
    "estimator.gap",
    "estimator.K",
    "estimator.mode",
    "train.batch_size",
    "train.epochs",
    "train.learning_rate",
    "train.seeds",
    "schedule.kind",
    "schedule.M",
    "schedule.mid_temp",
    "schedule.low_temp",
    "data.source",
    "data.path",
    "data.limit",
    "data.n",
    "data.patterns",
    "data.seed",
    "data.binarize",
    "model.hidden_enc",
    "model.hidden_dec",
    "variance.resamples",
    "variance.batch",
    "checkpoint.every",
    "ablation.estimators",
    "ablation.taus",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, VaeError> {
    v.parse()
        .map_err(|_| VaeError::Config(format!("bad value {v:?} for {key}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, VaeError> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

impl TrainConfig {
    pub fn from_path(path: &Path) -> Result<Self, VaeError> {
        let text = std::fs::read_to_string(path).map_err(|source| VaeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        text.parse()
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let e = &self.estimator;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("estimator.kind", e.kind.as_str().into());
        put("estimator.tau", e.tau.to_string());
        put(
            "estimator.gap",
            match e.gap {
                Gap::Const(g) => g.to_string(),
                Gap::Pi => "pi".into(),
            },
        );
        put("estimator.K", e.mc_samples.to_string());
        put("estimator.mode", format!("{:?}", e.mode).to_lowercase());
        put("train.batch_size", self.batch_size.to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.learning_rate", self.learning_rate.to_string());
        put("train.seeds", join(&self.seeds));
        match self.schedule {
            TemperatureSchedule::Constant(_) => put("schedule.kind", "constant".into()),
            TemperatureSchedule::Mixed { m, mid, low } => {
                put("schedule.kind", "mixed".into());
                put("schedule.M", m.to_string());
                put("schedule.mid_temp", mid.to_string());
                put("schedule.low_temp", low.to_string());
            }
        }
        match &self.dataset {
            DatasetSpec::Mnist { dir, limit } => {
                put("data.source", "mnist".into());
                if let Some(d) = dir {
                    put("data.path", d.display().to_string());
                }
                if let Some(l) = limit {
                    put("data.limit", l.to_string());
                }
            }
            DatasetSpec::Synthetic { n, patterns, seed } => {
                put("data.source", "synthetic".into());
                put("data.n", n.to_string());
                put("data.patterns", patterns.to_string());
                put("data.seed", seed.to_string());
            }
        }
        put("data.binarize", self.binarize.to_string());
        put("model.hidden_enc", self.hidden_enc.to_string());
        put("model.hidden_dec", self.hidden_dec.to_string());
        put("variance.resamples", self.variance_resamples.to_string());
        put("variance.batch", self.variance_batch.to_string());
        put("checkpoint.every", self.checkpoint_every.to_string());
        put("ablation.estimators", self.ablation_estimators.join(","));
        put("ablation.taus", join(&self.ablation_taus));
        s
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        self.estimator.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(VaeError::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(VaeError::Config("learning_rate must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(VaeError::Config("at least one seed is required".into()));
        }
        if let TemperatureSchedule::Mixed { m, mid, low } = self.schedule {
            if m == 0 || !(mid > 0.0) || !(low > 0.0) {
                return Err(VaeError::Config(
                    "mixed schedule needs M >= 1 and positive temperatures".into(),
                ));
            }
        }
        if self.hidden_enc == 0 || self.hidden_dec == 0 {
            return Err(VaeError::Config("hidden sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// Copy with a different estimator; a constant schedule follows its
    /// temperature.
    pub fn with_estimator(&self, estimator: EstimatorConfig) -> Self {
        let schedule = match self.schedule {
            TemperatureSchedule::Constant(_) => TemperatureSchedule::Constant(estimator.tau),
            mixed => mixed,
        };
        Self {
            estimator,
            schedule,
            ..self.clone()
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl FromStr for TrainConfig {
    type Err = VaeError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut kv = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| VaeError::Config(format!("line {}: expected key = value", no + 1)))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(VaeError::Config(format!("line {}: unknown key {k:?}", no + 1)));
            }
            kv.insert(k.to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).map(String::as_str);
        let mut cfg = TrainConfig::default();

        let kind: EstimatorKind = match get("estimator.kind") {
            Some(v) => v.parse()?,
            None => cfg.estimator.kind,
        };
        let mut est = EstimatorConfig::new(kind, cfg.estimator.tau);
        if let Some(v) = get("estimator.tau") {
            est.tau = parse("estimator.tau", v)?;
        }
        if let Some(v) = get("estimator.gap") {
            est.gap = v.parse()?;
        }
        if let Some(v) = get("estimator.K") {
            est.mc_samples = parse("estimator.K", v)?;
        }
        if let Some(v) = get("estimator.mode") {
            est.mode = v.parse::<Mode>()?;
        }
        cfg.estimator = est;

        if let Some(v) = get("train.batch_size") {
            cfg.batch_size = parse("train.batch_size", v)?;
        }
        if let Some(v) = get("train.epochs") {
            cfg.epochs = parse("train.epochs", v)?;
        }
        if let Some(v) = get("train.learning_rate") {
            cfg.learning_rate = parse("train.learning_rate", v)?;
        }
        if let Some(v) = get("train.seeds") {
            cfg.seeds = list("train.seeds", v)?;
        }

        cfg.schedule = match get("schedule.kind").unwrap_or("constant") {
            "constant" => TemperatureSchedule::Constant(est.tau),
            "mixed" => TemperatureSchedule::Mixed {
                m: parse("schedule.M", get("schedule.M").unwrap_or("20"))?,
                mid: parse("schedule.mid_temp", get("schedule.mid_temp").unwrap_or("0.5"))?,
                low: parse(
                    "schedule.low_temp",
                    get("schedule.low_temp").unwrap_or(&est.tau.to_string()),
                )?,
            },
            other => return Err(VaeError::Config(format!("unknown schedule.kind {other:?}"))),
        };

        cfg.dataset = match get("data.source").unwrap_or("synthetic") {
            "synthetic" => DatasetSpec::Synthetic {
                n: parse("data.n", get("data.n").unwrap_or("10000"))?,
                patterns: parse("data.patterns", get("data.patterns").unwrap_or("40"))?,
                seed: parse("data.seed", get("data.seed").unwrap_or("0"))?,
            },
            "mnist" => DatasetSpec::Mnist {
                dir: get("data.path").map(PathBuf::from),
                limit: get("data.limit").map(|v| parse("data.limit", v)).transpose()?,
            },
            other => return Err(VaeError::Config(format!("unknown data.source {other:?}"))),
        };
        if let Some(v) = get("data.binarize") {
            cfg.binarize = parse("data.binarize", v)?;
        }
        if let Some(v) = get("model.hidden_enc") {
            cfg.hidden_enc = parse("model.hidden_enc", v)?;
        }
        if let Some(v) = get("model.hidden_dec") {
            cfg.hidden_dec = parse("model.hidden_dec", v)?;
        }
        if let Some(v) = get("variance.resamples") {
            cfg.variance_resamples = parse("variance.resamples", v)?;
        }
        if let Some(v) = get("variance.batch") {
            cfg.variance_batch = parse("variance.batch", v)?;
        }
        if let Some(v) = get("checkpoint.every") {
            cfg.checkpoint_every = parse("checkpoint.every", v)?;
        }
        if let Some(v) = get("ablation.estimators") {
            cfg.ablation_estimators = v.split(',').map(|s| s.trim().to_string()).collect();
        }
        if let Some(v) = get("ablation.taus") {
            cfg.ablation_taus = list("ablation.taus", v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.schedule = TemperatureSchedule::Mixed {
            m: 20,
            mid: 0.5,
            low: 0.1,
        };
        cfg.estimator = EstimatorConfig::gr_mck(10, 0.1);
        let back: TrainConfig = cfg.to_text().parse().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = "estimator.kind = GST\nestimator.colour = red\n".parse::<TrainConfig>();
        assert!(matches!(err, Err(VaeError::Config(m)) if m.contains("line 2")));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg: TrainConfig = "# run\n\nestimator.kind = STGS  # baseline\nestimator.tau = 1.0\n"
            .parse()
            .unwrap();
        assert_eq!(cfg.estimator.kind, EstimatorKind::Stgs);
        assert_eq!(cfg.schedule, TemperatureSchedule::Constant(1.0));
    }
}
