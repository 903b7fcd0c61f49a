//! Subcommand implementations behind the `lbbsp` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lbbsp_core::config::ScenarioConfig;
use lbbsp_core::coordination::SchemeKind;
use lbbsp_core::metrics::{fmt_sig9, write_records_csv, Metrics};
use lbbsp_core::predictor::{NarxTraining, PredictorKind};
use lbbsp_core::sim::{predictor_rmse, run_training, BenchmarkTrace, MemoryModel, RunOptions, RunOutput};
use lbbsp_core::sizer::{allocate_oracle, cpu_allocate, gpu_allocate, GpuProfile, OracleInstance};

pub const RECORDS_FILE: &str = "records.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const PREDICT_BENCH_FILE: &str = "predict_bench.csv";

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
        if let Some(b) = cfg.benchmark.as_mut() {
            b.seed = seed;
        }
    }
    Ok(cfg)
}

pub fn run_config(cfg: &ScenarioConfig) -> Result<(RunOutput, Metrics)> {
    let scenario = cfg.build()?;
    let out = run_training(&scenario, RunOptions::default())?;
    let metrics = Metrics::from_records(&out.records, &scenario.convergence);
    Ok((out, metrics))
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

/// Writes `records.csv` and `metrics.json` into `out`.
pub fn cmd_run(config: &Path, out: &Path, seed: Option<u64>) -> Result<Metrics> {
    let cfg = load_config(config, seed)?;
    let (run, metrics) = run_config(&cfg)?;
    create_dir(out)?;
    let records_path = out.join(RECORDS_FILE);
    let file = fs::File::create(&records_path).with_context(|| format!("creating {}", records_path.display()))?;
    let mut writer = std::io::BufWriter::new(file);
    write_records_csv(&run.records, &mut writer).with_context(|| format!("writing {}", records_path.display()))?;
    std::io::Write::flush(&mut writer)?;
    let metrics_path = out.join(METRICS_FILE);
    fs::write(&metrics_path, metrics.to_json() + "\n")
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    log::info!("{} updates, converged: {}", metrics.updates, metrics.converged);
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub scenario: String,
    pub scheme: SchemeKind,
    pub metrics: Metrics,
    /// Mean per-update time over that of the same scenario run under BSP.
    pub normalized_per_update_time: f64,
}

pub const COMPARISON_COLUMNS: [&str; 11] = [
    "scenario",
    "scheme",
    "updates",
    "converged",
    "updates_to_convergence",
    "time_to_convergence_s",
    "mean_per_update_time",
    "normalized_per_update_time",
    "wastage",
    "predictor_rmse",
    "sim_time_s",
];

fn scenario_name(cfg: &ScenarioConfig, path: &Path) -> String {
    cfg.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    })
}

fn bsp_baseline(cfg: &ScenarioConfig, metrics: &Metrics) -> Result<f64> {
    if cfg.scheme == SchemeKind::Bsp {
        return Ok(metrics.mean_per_update_time);
    }
    let mut bsp = cfg.clone();
    bsp.scheme = SchemeKind::Bsp;
    Ok(run_config(&bsp)?.1.mean_per_update_time)
}

pub fn compare_configs(configs: &[(String, ScenarioConfig)]) -> Result<Vec<ComparisonRow>> {
    configs
        .iter()
        .map(|(name, cfg)| {
            let (_, metrics) = run_config(cfg).with_context(|| format!("running scenario {name}"))?;
            let baseline = bsp_baseline(cfg, &metrics)?;
            Ok(ComparisonRow {
                scenario: name.clone(),
                scheme: cfg.scheme,
                normalized_per_update_time: metrics.mean_per_update_time / baseline,
                metrics,
            })
        })
        .collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(COMPARISON_COLUMNS)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.scenario.clone(),
            r.scheme.as_str().to_string(),
            m.updates.to_string(),
            m.converged.to_string(),
            opt(m.updates_to_convergence),
            opt(m.time_to_convergence_s.map(fmt_sig9)),
            fmt_sig9(m.mean_per_update_time),
            fmt_sig9(r.normalized_per_update_time),
            fmt_sig9(m.wastage),
            fmt_sig9(m.predictor_rmse),
            fmt_sig9(m.sim_time_s),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Runs every config and writes `comparison.csv`, one row per scenario.
pub fn cmd_compare(configs: &[PathBuf], out: &Path, seed: Option<u64>) -> Result<Vec<ComparisonRow>> {
    if configs.is_empty() {
        bail!("compare needs at least one --config");
    }
    let loaded = configs
        .iter()
        .map(|p| {
            let cfg = load_config(p, seed)?;
            Ok((scenario_name(&cfg, p), cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = compare_configs(&loaded)?;
    create_dir(out)?;
    let path = out.join(COMPARISON_FILE);
    fs::write(&path, comparison_csv(&rows)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub predictor: PredictorKind,
    pub rmse: f64,
    pub mean_per_update_time: f64,
    pub normalized_per_update_time: f64,
}

/// Desk-scale predictor benchmark: four LB-BSP workers replaying the standard
/// benchmark trace for its full length, NARX warm-up 50.
pub fn default_bench_config() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new(SchemeKind::LbBsp, 4);
    let bench = BenchmarkTrace::default();
    cfg.name = Some("predict-bench".into());
    cfg.max_iterations = bench.iterations as u64;
    cfg.benchmark = Some(bench);
    cfg.narx = NarxTraining {
        warmup: 50,
        ..NarxTraining::default()
    };
    // never reached: the benchmark runs the whole trace
    cfg.loss_threshold = 1e-12;
    cfg
}

const BENCH_PREDICTORS: [PredictorKind; 3] = [PredictorKind::Memoryless, PredictorKind::Ema, PredictorKind::Narx];

/// RMSE of one-step speed predictions pooled over every worker's series
/// (scored from the warm-up on), plus the LB-BSP per-update time obtained with
/// each predictor, normalised by BSP on the same scenario.
pub fn predict_bench(cfg: &ScenarioConfig) -> Result<Vec<BenchRow>> {
    let Some(bench) = &cfg.benchmark else {
        bail!("config field `benchmark`: predict-bench needs a benchmark trace");
    };
    let memory = MemoryModel {
        threshold: cfg.memory_threshold,
        floor: cfg.memory_penalty_floor,
    };
    let mut bsp = cfg.clone();
    bsp.scheme = SchemeKind::Bsp;
    let baseline = run_config(&bsp)?.1.mean_per_update_time;
    BENCH_PREDICTORS
        .iter()
        .map(|&kind| {
            let mut squared = 0.0;
            for w in 0..cfg.workers {
                let series = BenchmarkTrace {
                    seed: bench.seed.wrapping_add(w as u64),
                    ..bench.clone()
                }
                .generate()?;
                let rmse = predictor_rmse(
                    &series,
                    cfg.base_speed,
                    kind,
                    cfg.ema_alpha,
                    &cfg.narx,
                    &memory,
                    cfg.narx.warmup,
                    cfg.seed.wrapping_add(w as u64),
                )?;
                squared += rmse * rmse;
            }
            let mut run = cfg.clone();
            run.scheme = SchemeKind::LbBsp;
            run.predictor = kind;
            let mean = run_config(&run)?.1.mean_per_update_time;
            Ok(BenchRow {
                predictor: kind,
                rmse: (squared / cfg.workers as f64).sqrt(),
                mean_per_update_time: mean,
                normalized_per_update_time: mean / baseline,
            })
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("predictor,rmse,mean_per_update_time,normalized_per_update_time\n");
    for r in rows {
        let name = serde_json::to_value(r.predictor)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        s.push_str(&format!(
            "{name},{},{},{}\n",
            fmt_sig9(r.rmse),
            fmt_sig9(r.mean_per_update_time),
            fmt_sig9(r.normalized_per_update_time)
        ));
    }
    s
}

pub fn cmd_predict_bench(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<Vec<BenchRow>> {
    let cfg = match config {
        Some(path) => load_config(path, seed)?,
        None => {
            let mut cfg = default_bench_config();
            if let Some(seed) = seed {
                cfg.seed = seed;
                if let Some(b) = cfg.benchmark.as_mut() {
                    b.seed = seed;
                }
            }
            cfg
        }
    };
    let rows = predict_bench(&cfg)?;
    create_dir(out)?;
    let path = out.join(PREDICT_BENCH_FILE);
    fs::write(&path, bench_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    Ok(rows)
}

/// Parses `m:b:x_s:x_o`.
pub fn parse_gpu_profile(s: &str) -> Result<GpuProfile> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    let [m, b, x_s, x_o] = parts.as_slice() else {
        bail!("gpu profile `{s}` must look like m:b:x_s:x_o");
    };
    let m: f64 = m.trim().parse().with_context(|| format!("slope `{m}` in `{s}`"))?;
    let b: f64 = b.trim().parse().with_context(|| format!("intercept `{b}` in `{s}`"))?;
    let x_s: u64 = x_s
        .trim()
        .parse()
        .with_context(|| format!("saturation point `{x_s}` in `{s}`"))?;
    let x_o: u64 = x_o
        .trim()
        .parse()
        .with_context(|| format!("out-of-memory point `{x_o}` in `{s}`"))?;
    Ok(GpuProfile::new(m, b, x_s, x_o)?)
}

pub fn solve_cpu(speeds: &[f64], budget: u64, oracle: bool) -> Result<Vec<u64>> {
    let assignment = if oracle {
        allocate_oracle(
            &OracleInstance::Cpu {
                speeds: speeds.to_vec(),
            },
            budget,
        )?
    } else {
        cpu_allocate(speeds, budget)?
    };
    Ok(assignment.sizes)
}

/// `comm` may be empty (all zero).
pub fn solve_gpu(profiles: &[GpuProfile], comm: &[f64], budget: u64, oracle: bool) -> Result<Vec<u64>> {
    let comm = if comm.is_empty() {
        vec![0.0; profiles.len()]
    } else {
        comm.to_vec()
    };
    if comm.len() != profiles.len() {
        bail!("{} communication times for {} profiles", comm.len(), profiles.len());
    }
    let assignment = if oracle {
        allocate_oracle(
            &OracleInstance::Gpu {
                profiles: profiles.to_vec(),
                comm,
            },
            budget,
        )?
    } else {
        gpu_allocate(profiles, &comm, budget)?
    };
    Ok(assignment.sizes)
}

pub fn format_sizes(sizes: &[u64]) -> String {
    sizes.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}
