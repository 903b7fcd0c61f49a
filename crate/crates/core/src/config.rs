//! Scenario configuration (JSON, `lower_snake_case` keys).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coordination::{SchemeConfig, SchemeKind};
use crate::error::{Error, Result};
use crate::predictor::{NarxModel, NarxTraining, PredictorKind, DEFAULT_EMA_ALPHA};
use crate::sgd::generate_dataset_with_noise;
use crate::sim::{
    heterogeneity_preset, mix_seed, BandwidthEvent, BenchmarkTrace, CommModel, Convergence, MemoryModel,
    PredictorSettings, Preset, ResourceSource, Scenario, WorkerProfile,
};
use crate::sizer::{GpuProfile, DEFAULT_SPEED_FLOOR};
use crate::trace::{map_traces, parse_trace};

/// Global batch per worker when `budget` is omitted.
pub const DEFAULT_BATCH_PER_WORKER: u64 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuWorkerConfig {
    pub m: f64,
    pub b: f64,
    pub x_s: u64,
    pub x_o: u64,
    #[serde(default)]
    pub comm_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthEventConfig {
    pub worker: usize,
    pub at_iteration: u64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub scheme: SchemeKind,
    #[serde(default)]
    pub staleness_threshold: u64,
    pub workers: usize,
    /// Defaults to 128 per worker.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,

    // CPU clusters take exactly one resource source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub static_stragglers: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
    /// Every worker replays this series with its seed offset by the worker id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkTrace>,
    #[serde(default = "default_base_speed")]
    pub base_speed: f64,
    #[serde(default)]
    pub comm_time_s: f64,

    /// Makes this a GPU cluster; one entry per worker.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_profiles: Option<Vec<GpuWorkerConfig>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bandwidth_events: Vec<BandwidthEventConfig>,

    #[serde(default = "default_predictor")]
    pub predictor: PredictorKind,
    #[serde(default = "default_alpha")]
    pub ema_alpha: f64,
    #[serde(default)]
    pub narx: NarxTraining,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narx_weights_path: Option<PathBuf>,

    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_dataset_seed")]
    pub dataset_seed: u64,
    #[serde(default = "default_dataset_size")]
    pub dataset_size: usize,
    #[serde(default = "default_dataset_dim")]
    pub dataset_dim: usize,
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,

    #[serde(default = "default_loss_threshold")]
    pub loss_threshold: f64,
    #[serde(default = "default_consecutive")]
    pub consecutive: u64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,

    #[serde(default = "default_memory_threshold")]
    pub memory_threshold: f64,
    #[serde(default = "default_memory_floor")]
    pub memory_penalty_floor: f64,
    #[serde(default = "default_speed_floor")]
    pub speed_floor: f64,
}

fn default_base_speed() -> f64 {
    100.0
}
fn default_predictor() -> PredictorKind {
    PredictorKind::Ema
}
fn default_alpha() -> f64 {
    DEFAULT_EMA_ALPHA
}
fn default_learning_rate() -> f64 {
    0.005
}
fn default_dataset_seed() -> u64 {
    7
}
fn default_dataset_size() -> usize {
    2000
}
fn default_dataset_dim() -> usize {
    10
}
fn default_label_noise() -> f64 {
    crate::sgd::DEFAULT_LABEL_NOISE
}
fn default_loss_threshold() -> f64 {
    0.6
}
fn default_consecutive() -> u64 {
    10
}
fn default_max_iterations() -> u64 {
    1000
}
fn default_seed() -> u64 {
    1
}
fn default_memory_threshold() -> f64 {
    MemoryModel::default().threshold
}
fn default_memory_floor() -> f64 {
    MemoryModel::default().floor
}
fn default_speed_floor() -> f64 {
    DEFAULT_SPEED_FLOOR
}

/// Pulls the offending key out of a serde message such as "unknown field `x`".
fn serde_field(err: &serde_json::Error, text: &str) -> String {
    let msg = err.to_string();
    for marker in ["unknown field `", "missing field `", "duplicate field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(field) = rest.split('`').next() {
                return field.to_string();
            }
        }
    }
    key_before(text, err.line(), err.column()).unwrap_or_else(|| "<document>".to_string())
}

/// Last object key that starts before the 1-based `line`/`column` position.
fn key_before(text: &str, line: usize, column: usize) -> Option<String> {
    let offset: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + column;
    let head = text.get(..offset.min(text.len()))?;
    let colon = head.rfind(':')?;
    let key = head[..colon].trim_end().strip_suffix('"')?;
    let start = key.rfind('"')?;
    Some(key[start + 1..].to_string())
}

impl ScenarioConfig {
    /// A config with every optional field at its default.
    pub fn new(scheme: SchemeKind, workers: usize) -> Self {
        let text = format!(r#"{{"scheme": "{}", "workers": {workers}}}"#, scheme.as_str());
        serde_json::from_str(&text).expect("minimal config is valid")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| Error::config(serde_field(&e, text), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative paths inside it are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.trace_path, &mut cfg.narx_weights_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn budget(&self) -> u64 {
        self.budget.unwrap_or(DEFAULT_BATCH_PER_WORKER * self.workers as u64)
    }

    pub fn is_gpu(&self) -> bool {
        self.gpu_profiles.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be a finite value > 0, got {v}")))
            }
        };
        let fraction = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be within [0, 1], got {v}")))
            }
        };
        if self.workers == 0 {
            return Err(Error::config("workers", "must be >= 1"));
        }
        if self.budget() < self.workers as u64 {
            return Err(Error::config(
                "budget",
                format!("must be >= the worker count {}, got {}", self.workers, self.budget()),
            ));
        }
        positive("learning_rate", self.learning_rate)?;
        positive("loss_threshold", self.loss_threshold)?;
        positive("base_speed", self.base_speed)?;
        positive("speed_floor", self.speed_floor)?;
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(Error::config(
                "ema_alpha",
                format!("must be in (0, 1], got {}", self.ema_alpha),
            ));
        }
        if self.consecutive == 0 {
            return Err(Error::config("consecutive", "must be >= 1"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations", "must be >= 1"));
        }
        if self.dataset_size == 0 {
            return Err(Error::config("dataset_size", "must be >= 1"));
        }
        if self.dataset_dim == 0 {
            return Err(Error::config("dataset_dim", "must be >= 1"));
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) {
            return Err(Error::config(
                "label_noise",
                format!("must be >= 0, got {}", self.label_noise),
            ));
        }
        if !(self.comm_time_s >= 0.0 && self.comm_time_s.is_finite()) {
            return Err(Error::config(
                "comm_time_s",
                format!("must be >= 0, got {}", self.comm_time_s),
            ));
        }
        positive("memory_threshold", self.memory_threshold)?;
        fraction("memory_threshold", self.memory_threshold)?;
        fraction("memory_penalty_floor", self.memory_penalty_floor)?;
        if self.narx.warmup < 3 {
            return Err(Error::config(
                "narx.warmup",
                format!("must be >= 3, got {}", self.narx.warmup),
            ));
        }
        if self.narx.window == 0 || self.narx.max_epochs == 0 || self.narx.patience == 0 {
            return Err(Error::config("narx", "window, max_epochs and patience must be >= 1"));
        }
        positive("narx.step", self.narx.step)?;

        for e in &self.bandwidth_events {
            if e.worker >= self.workers {
                return Err(Error::config(
                    "bandwidth_events",
                    format!("worker {} does not exist ({} workers)", e.worker, self.workers),
                ));
            }
            positive("bandwidth_events", e.factor)?;
        }

        match &self.gpu_profiles {
            Some(profiles) => {
                if profiles.len() != self.workers {
                    return Err(Error::config(
                        "gpu_profiles",
                        format!("expected {} entries, got {}", self.workers, profiles.len()),
                    ));
                }
                for (i, p) in profiles.iter().enumerate() {
                    GpuProfile::new(p.m, p.b, p.x_s, p.x_o)
                        .map_err(|e| Error::config(format!("gpu_profiles[{i}]"), e.to_string()))?;
                    if !(p.comm_time_s >= 0.0 && p.comm_time_s.is_finite()) {
                        return Err(Error::config(format!("gpu_profiles[{i}].comm_time_s"), "must be >= 0"));
                    }
                }
                if let Some(field) = [
                    ("preset", self.preset.is_some()),
                    ("trace_path", self.trace_path.is_some()),
                    ("benchmark", self.benchmark.is_some()),
                ]
                .iter()
                .find_map(|(f, set)| set.then_some(*f))
                {
                    return Err(Error::config(field, "not used by GPU clusters"));
                }
            }
            None => {
                let sources = [
                    self.preset.is_some(),
                    self.trace_path.is_some(),
                    self.benchmark.is_some(),
                ];
                match sources.iter().filter(|s| **s).count() {
                    1 => {}
                    0 => {
                        return Err(Error::config(
                            "preset",
                            "a CPU cluster needs one of `preset`, `trace_path` or `benchmark`",
                        ))
                    }
                    _ => {
                        return Err(Error::config(
                            "preset",
                            "`preset`, `trace_path` and `benchmark` are exclusive",
                        ))
                    }
                }
                if self.preset.is_some() && self.workers < 2 {
                    return Err(Error::config("workers", "heterogeneity presets need >= 2 workers"));
                }
                if let Some(b) = &self.benchmark {
                    b.validate().map_err(|e| Error::config("benchmark", e.to_string()))?;
                }
            }
        }
        Ok(())
    }

    fn comm_for(&self, worker: usize, base_s: f64) -> CommModel {
        CommModel {
            base_s,
            events: self
                .bandwidth_events
                .iter()
                .filter(|e| e.worker == worker)
                .map(|e| BandwidthEvent {
                    at_iteration: e.at_iteration,
                    factor: e.factor,
                })
                .collect(),
        }
    }

    fn build_workers(&self) -> Result<Vec<WorkerProfile>> {
        let n = self.workers;
        if let Some(profiles) = &self.gpu_profiles {
            return profiles
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    Ok(WorkerProfile::gpu(
                        i,
                        GpuProfile::new(p.m, p.b, p.x_s, p.x_o)?,
                        self.comm_for(i, p.comm_time_s),
                        mix_seed(self.seed, i as u64 + 1),
                    ))
                })
                .collect();
        }
        let mut workers = if let Some(preset) = self.preset {
            heterogeneity_preset(preset, n, self.base_speed, self.static_stragglers, self.seed)?
        } else if let Some(path) = &self.trace_path {
            let traces = parse_trace(path)?;
            let picks = map_traces(&traces, n, self.seed)?;
            picks
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    WorkerProfile::cpu(
                        i,
                        self.base_speed,
                        ResourceSource::Trace(Arc::new(traces[t].clone())),
                        mix_seed(self.seed, i as u64 + 1),
                    )
                })
                .collect()
        } else if let Some(bench) = &self.benchmark {
            (0..n)
                .map(|i| {
                    let series = BenchmarkTrace {
                        seed: bench.seed.wrapping_add(i as u64),
                        ..bench.clone()
                    }
                    .generate()?;
                    Ok(WorkerProfile::cpu(
                        i,
                        self.base_speed,
                        ResourceSource::Series(Arc::new(series)),
                        mix_seed(self.seed, i as u64 + 1),
                    ))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            return Err(Error::config("preset", "no resource source"));
        };
        for (i, w) in workers.iter_mut().enumerate() {
            w.comm = self.comm_for(i, self.comm_time_s);
        }
        Ok(workers)
    }

    /// Resolves files, generates the dataset and builds the simulation input.
    pub fn build(&self) -> Result<Scenario> {
        self.validate()?;
        let initial_model = match &self.narx_weights_path {
            Some(path) => Some(NarxModel::load(path)?),
            None => None,
        };
        let scenario = Scenario {
            scheme: SchemeConfig::new(self.scheme, self.workers, self.budget(), self.staleness_threshold)?,
            workers: self.build_workers()?,
            dataset: Arc::new(generate_dataset_with_noise(
                self.dataset_seed,
                self.dataset_size,
                self.dataset_dim,
                self.label_noise,
            )?),
            learning_rate: self.learning_rate,
            predictor: PredictorSettings {
                kind: self.predictor,
                alpha: self.ema_alpha,
                training: self.narx,
                initial_model,
            },
            convergence: Convergence {
                loss_threshold: self.loss_threshold,
                consecutive: self.consecutive,
            },
            max_iterations: self.max_iterations,
            seed: self.seed,
            memory: MemoryModel {
                threshold: self.memory_threshold,
                floor: self.memory_penalty_floor,
            },
            speed_floor: self.speed_floor,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ScenarioConfig::from_json_str(r#"{"scheme": "lb_bsp", "workers": 4, "preset": "homo"}"#).unwrap();
        assert_eq!(cfg.budget(), 512);
        assert_eq!(cfg.predictor, PredictorKind::Ema);
        assert_eq!(cfg.narx.warmup, 500);
        assert_eq!(cfg.loss_threshold, 0.6);
        let sc = cfg.build().unwrap();
        assert_eq!(sc.workers.len(), 4);
        assert_eq!(sc.scheme.total_budget, 512);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ScenarioConfig::from_json_str(r#"{"scheme": "bsp", "workers": 2, "preset": "homo", "wokers": 3}"#)
            .unwrap_err();
        assert!(
            matches!(&err, Error::Config { field, .. } if field == "wokers"),
            "{err}"
        );
    }

    #[test]
    fn type_errors_name_the_key() {
        for (json, field) in [
            ("{\"scheme\": \"bulk\", \"workers\": 2}", "scheme"),
            ("{\"scheme\": \"bsp\",\n  \"workers\": \"two\"}", "workers"),
            (
                "{\"scheme\": \"bsp\", \"workers\": 2, \"benchmark\": {\"levels\": 3}}",
                "levels",
            ),
        ] {
            let err = ScenarioConfig::from_json_str(json).unwrap_err();
            assert!(
                matches!(&err, Error::Config { field: f, .. } if f == field),
                "{json}: {err}"
            );
        }
    }

    #[test]
    fn invalid_values_name_their_field() {
        let cases = [
            (r#"{"scheme": "bsp", "workers": 0, "preset": "homo"}"#, "workers"),
            (
                r#"{"scheme": "bsp", "workers": 4, "budget": 3, "preset": "homo"}"#,
                "budget",
            ),
            (
                r#"{"scheme": "bsp", "workers": 2, "preset": "homo", "learning_rate": -1}"#,
                "learning_rate",
            ),
            (
                r#"{"scheme": "bsp", "workers": 2, "preset": "homo", "loss_threshold": 0}"#,
                "loss_threshold",
            ),
            (r#"{"scheme": "bsp", "workers": 2}"#, "preset"),
            (
                r#"{"scheme": "bsp", "workers": 2, "preset": "homo", "trace_path": "t.csv"}"#,
                "preset",
            ),
            (r#"{"workers": 2, "preset": "homo"}"#, "scheme"),
            (
                r#"{"scheme": "bsp", "workers": 1, "gpu_profiles": [{"m": 0.01, "b": 0, "x_s": 9, "x_o": 3}]}"#,
                "gpu_profiles[0]",
            ),
        ];
        for (text, field) in cases {
            match ScenarioConfig::from_json_str(text) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn missing_trace_file_names_path() {
        let cfg = ScenarioConfig::from_json_str(
            r#"{"scheme": "bsp", "workers": 2, "trace_path": "/nonexistent/traces.csv"}"#,
        )
        .unwrap();
        let err = cfg.build().unwrap_err();
        assert!(err.to_string().contains("/nonexistent/traces.csv"), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = ScenarioConfig::new(SchemeKind::Ssp, 3);
        cfg.preset = Some(Preset::HeteroL2);
        cfg.staleness_threshold = 2;
        let again = ScenarioConfig::from_json_str(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn gpu_config_builds_gpu_workers() {
        let cfg = ScenarioConfig::from_json_str(
            r#"{"scheme": "lb_bsp", "workers": 2, "budget": 500,
                "gpu_profiles": [{"m": 0.002, "b": 0.05, "x_s": 58, "x_o": 384, "comm_time_s": 0.075},
                                 {"m": 0.001, "b": 0.05, "x_s": 92, "x_o": 1184}],
                "bandwidth_events": [{"worker": 0, "at_iteration": 10, "factor": 3}]}"#,
        )
        .unwrap();
        let sc = cfg.build().unwrap();
        assert!(sc.is_gpu());
        assert!((sc.workers[0].comm.time_at(10) - 0.225).abs() < 1e-12);
        assert_eq!(sc.workers[1].comm.time_at(10), 0.0);
    }
}
