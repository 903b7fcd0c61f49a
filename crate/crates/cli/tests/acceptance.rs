//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use lbbsp_cli::{cmd_run, default_bench_config, predict_bench};
use lbbsp_core::config::{BandwidthEventConfig, GpuWorkerConfig, ScenarioConfig};
use lbbsp_core::coordination::{aggregate_weighted, SchemeConfig, SchemeKind};
use lbbsp_core::metrics::Metrics;
use lbbsp_core::predictor::PredictorKind;
use lbbsp_core::sgd::{batch_gradient_at, generate_dataset, Dataset};
use lbbsp_core::sim::{
    effective_speed, run_training, Convergence, MemoryModel, PredictorSettings, Preset, ResourceSource, RunOptions,
    RunOutput, Scenario, StragglerSpec, WorkerProfile,
};
use lbbsp_core::sizer::{
    allocate_oracle, cpu_allocate, cpu_objective, gpu_allocate, gpu_objective, GpuProfile, OracleInstance,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(cfg: &ScenarioConfig, trajectory: bool) -> (RunOutput, Metrics) {
    let scenario = cfg.build().expect("scenario builds");
    let out = run_training(
        &scenario,
        RunOptions {
            record_trajectory: trajectory,
        },
    )
    .expect("run completes");
    let m = Metrics::from_records(&out.records, &scenario.convergence);
    (out, m)
}

fn preset_config(scheme: SchemeKind, preset: Preset, n: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new(scheme, n);
    cfg.preset = Some(preset);
    cfg
}

/// Mean logistic gradient over all indices, evaluated directly.
fn union_gradient(data: &Dataset, params: &[f64], indices: &[usize]) -> Vec<f64> {
    let mut g = vec![0.0; params.len()];
    for &i in indices {
        let (x, y) = data.sample(i);
        let z: f64 = params.iter().zip(x).map(|(w, xi)| w * xi).sum();
        let p = 1.0 / (1.0 + (-z).exp());
        for (gj, xj) in g.iter_mut().zip(x) {
            *gj += (p - y) * xj;
        }
    }
    g.iter().map(|v| v / indices.len() as f64).collect()
}

fn criterion_1() -> Outcome {
    let data = generate_dataset(3, 1000, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let workers = rng.random_range(2..=8);
        let batch = rng.random_range(workers..=600);
        let params: Vec<f64> = (0..data.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let indices: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.len())).collect();
        let mut cuts: Vec<usize> = (1..batch).collect();
        cuts.shuffle(&mut rng);
        cuts.truncate(workers - 1);
        cuts.sort();
        let mut grads = Vec::new();
        let mut start = 0;
        for end in cuts.into_iter().chain([batch]) {
            grads.push(batch_gradient_at(&params, &data, &indices[start..end]).unwrap());
            start = end;
        }
        let agg = aggregate_weighted(&grads).unwrap().values;
        let reference = union_gradient(&data, &params, &indices);
        let diff: f64 = agg
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    ensure(
        worst <= 1e-9,
        format!("max relative error {worst:.2e} over 100 partitions"),
    )
}

fn criterion_2() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for preset in [Preset::Homo, Preset::HeteroL2, Preset::HeteroL3] {
        let (bsp, mb) = run(&preset_config(SchemeKind::Bsp, preset, 32), true);
        let (lb, ml) = run(&preset_config(SchemeKind::LbBsp, preset, 32), true);
        let mut worst: f64 = 0.0;
        for (a, b) in bsp.trajectory.iter().zip(&lb.trajectory) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs() / y.abs().max(1.0));
            }
        }
        let same = bsp.trajectory.len() == lb.trajectory.len()
            && worst <= 1e-9
            && mb.converged
            && mb.updates_to_convergence == ml.updates_to_convergence;
        ok &= same;
        details.push(format!(
            "{preset:?}: updates {:?}/{:?}, max diff {worst:.1e}",
            mb.updates_to_convergence, ml.updates_to_convergence
        ));
    }
    ensure(ok, details.join("; "))
}

fn criterion_3() -> Outcome {
    let n = 32;
    let static_l3 = |scheme| {
        let mut cfg = preset_config(scheme, Preset::HeteroL3, n);
        cfg.static_stragglers = true;
        cfg
    };
    let lb_cfg = static_l3(SchemeKind::LbBsp);
    let scenario = lb_cfg.build().unwrap();
    let speeds: Vec<f64> = scenario
        .workers
        .iter()
        .map(|w| {
            let s = w.resources.sample(w.seed, 0, 0.0).unwrap();
            effective_speed(lb_cfg.base_speed, s.cpu, s.mem, &scenario.memory) * s.speed_factor
        })
        .collect();
    let v_min = speeds.iter().cloned().fold(f64::INFINITY, f64::min);
    let analytic = n as f64 * v_min / speeds.iter().sum::<f64>();
    let (_, bsp) = run(&static_l3(SchemeKind::Bsp), false);
    let (_, lb) = run(&lb_cfg, false);
    let ratio = lb.mean_per_update_time / bsp.mean_per_update_time;
    let deviation = (ratio / analytic - 1.0).abs();
    let (tb, tl) = (bsp.time_to_convergence_s, lb.time_to_convergence_s);
    let improvement = match (tb, tl) {
        (Some(b), Some(l)) => 1.0 - l / b,
        _ => f64::NAN,
    };
    ensure(
        deviation <= 0.03 && improvement >= 0.30,
        format!(
            "ratio {ratio:.4} vs analytic {analytic:.4} (deviation {:.2}%), convergence time improvement {:.1}%",
            100.0 * deviation,
            100.0 * improvement
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut lb_cfg = preset_config(SchemeKind::LbBsp, Preset::HeteroL3, 32);
    lb_cfg.static_stragglers = true;
    lb_cfg.predictor = PredictorKind::Oracle;
    let (_, lb) = run(&lb_cfg, false);
    let bsp: Vec<f64> = [Preset::Homo, Preset::HeteroL2, Preset::HeteroL3]
        .iter()
        .map(|&p| run(&preset_config(SchemeKind::Bsp, p, 32), false).1.wastage)
        .collect();
    let increasing = bsp.windows(2).all(|w| w[0] < w[1]);
    ensure(
        lb.wastage < 0.05 && increasing,
        format!(
            "LB-BSP wastage {:.4}; BSP wastage Homo {:.4} < L2 {:.4} < L3 {:.4}",
            lb.wastage, bsp[0], bsp[1], bsp[2]
        ),
    )
}

fn random_gpu(rng: &mut ChaCha8Rng, n: usize, max_xo: u64) -> (Vec<GpuProfile>, Vec<f64>) {
    let profiles = (0..n)
        .map(|_| {
            let x_s = rng.random_range(1..40);
            GpuProfile::new(
                rng.random_range(1e-4..0.01),
                rng.random_range(0.0..0.2),
                x_s,
                x_s + rng.random_range(0..max_xo),
            )
            .unwrap()
        })
        .collect();
    let comm = (0..n).map(|_| rng.random_range(0.0..0.1)).collect();
    (profiles, comm)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_gap: f64 = f64::NEG_INFINITY;
    let mut checked = 0;
    while checked < 200 {
        let n = rng.random_range(1..=4);
        // CPU instance
        let speeds: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..50.0)).collect();
        let budget = rng.random_range(n as u64..=200);
        let ours = cpu_allocate(&speeds, budget).unwrap();
        let best = allocate_oracle(&OracleInstance::Cpu { speeds: speeds.clone() }, budget).unwrap();
        let slack = speeds.iter().map(|v| 1.0 / v).fold(0.0, f64::max);
        worst_gap = worst_gap.max((cpu_objective(&ours.sizes, &speeds) - cpu_objective(&best.sizes, &speeds)) / slack);
        // GPU instance with a feasible budget
        let (profiles, comm) = random_gpu(&mut rng, n, 60);
        let lo: u64 = profiles.iter().map(|p| p.x_s).sum();
        let hi: u64 = profiles.iter().map(|p| p.x_o).sum::<u64>().min(200);
        if lo > hi {
            continue;
        }
        let budget = rng.random_range(lo..=hi);
        let ours = gpu_allocate(&profiles, &comm, budget).unwrap();
        let best = allocate_oracle(
            &OracleInstance::Gpu {
                profiles: profiles.clone(),
                comm: comm.clone(),
            },
            budget,
        )
        .unwrap();
        let slack = profiles.iter().map(|p| p.m).fold(0.0, f64::max);
        worst_gap = worst_gap
            .max((gpu_objective(&ours.sizes, &profiles, &comm) - gpu_objective(&best.sizes, &profiles, &comm)) / slack);
        checked += 1;
    }
    let mut violations = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=64);
        let speeds: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..1e3)).collect();
        let budget = rng.random_range(n as u64..100_000);
        if cpu_allocate(&speeds, budget).unwrap().sizes.iter().sum::<u64>() != budget {
            violations += 1;
        }
        let (profiles, comm) = random_gpu(&mut rng, n.min(16), 600);
        let lo: u64 = profiles.iter().map(|p| p.x_s).sum();
        let hi: u64 = profiles.iter().map(|p| p.x_o).sum();
        let budget = rng.random_range(lo..=hi);
        if gpu_allocate(&profiles, &comm, budget)
            .unwrap()
            .sizes
            .iter()
            .sum::<u64>()
            != budget
        {
            violations += 1;
        }
    }
    ensure(
        worst_gap <= 1.0 + 1e-9 && violations == 0,
        format!(
            "worst gap to oracle {worst_gap:.3} samples over 200 CPU + 200 GPU instances; {violations} conservation violations in 10000 x 2"
        ),
    )
}

fn criterion_6() -> Outcome {
    let rows = predict_bench(&default_bench_config()).map_err(|e| format!("{e:#}"))?;
    let get = |k| rows.iter().find(|r| r.predictor == k).unwrap();
    let (mem, ema, narx) = (
        get(PredictorKind::Memoryless),
        get(PredictorKind::Ema),
        get(PredictorKind::Narx),
    );
    let gap_ema = 1.0 - ema.rmse / mem.rmse;
    let gap_narx = 1.0 - narx.rmse / ema.rmse;
    ensure(
        gap_ema >= 0.10 && gap_narx >= 0.10 && narx.mean_per_update_time <= ema.mean_per_update_time,
        format!(
            "RMSE memoryless {:.2} > EMA {:.2} ({:.0}% gap) > NARX {:.2} ({:.0}% gap); per-update NARX {:.4} s vs EMA {:.4} s",
            mem.rmse,
            ema.rmse,
            100.0 * gap_ema,
            narx.rmse,
            100.0 * gap_narx,
            narx.mean_per_update_time,
            ema.mean_per_update_time
        ),
    )
}

const DROP_AT: u64 = 100;

fn gpu_config(scheme: SchemeKind, drop: bool) -> ScenarioConfig {
    let profile = |m, x_s, x_o| GpuWorkerConfig {
        m,
        b: 0.05,
        x_s,
        x_o,
        comm_time_s: 0.075,
    };
    let mut cfg = ScenarioConfig::new(scheme, 8);
    let mut profiles = vec![profile(0.002, 58, 384); 4];
    profiles.extend([profile(0.001, 92, 1184); 2]);
    profiles.extend([profile(0.0008, 103, 788); 2]);
    cfg.gpu_profiles = Some(profiles);
    cfg.budget = Some(3040);
    cfg.loss_threshold = 1e-12;
    cfg.max_iterations = 2 * DROP_AT;
    if drop {
        cfg.bandwidth_events = vec![BandwidthEventConfig {
            worker: 0,
            at_iteration: DROP_AT,
            factor: 3.0,
        }];
    }
    cfg
}

fn steady_wall(out: &RunOutput, from: u64, to: u64) -> f64 {
    let window: Vec<f64> = out
        .records
        .iter()
        .filter(|r| r.k >= from && r.k < to)
        .map(|r| r.iter_wall_s)
        .collect();
    window.iter().sum::<f64>() / window.len() as f64
}

fn criterion_7() -> Outcome {
    let degradation = |scheme| {
        let (out, _) = run(&gpu_config(scheme, true), false);
        let before = steady_wall(&out, DROP_AT - 20, DROP_AT);
        let after = steady_wall(&out, 2 * DROP_AT - 20, 2 * DROP_AT);
        (after / before - 1.0, out)
    };
    let (lb_deg, lb) = degradation(SchemeKind::LbBsp);
    let (bsp_deg, _) = degradation(SchemeKind::Bsp);
    let sizes: Vec<u64> = lb.records[DROP_AT as usize - 1].workers.iter().map(|w| w.x).collect();
    let slowest_max = sizes[..4].iter().max().unwrap();
    let faster_min = sizes[4..].iter().min().unwrap();
    ensure(
        slowest_max < faster_min && lb_deg.abs() <= 0.03 && bsp_deg >= 0.15,
        format!(
            "pre-drop sizes {sizes:?}; wall-clock change after 3x drop: LB-BSP {:+.1}%, BSP {:+.1}%",
            100.0 * lb_deg,
            100.0 * bsp_deg
        ),
    )
}

fn ssp_scenario(rng: &mut ChaCha8Rng, threshold: u64) -> Scenario {
    let n = rng.random_range(2..=8);
    let workers = (0..n)
        .map(|i| {
            let resources = if rng.random_bool(0.5) {
                ResourceSource::Straggler(StragglerSpec {
                    on_probability: rng.random_range(0.1..0.9),
                    cpu_consumed: rng.random_range(0.1..0.9),
                    mem_consumed: 0.0,
                    period: rng.random_range(1..6),
                })
            } else {
                ResourceSource::Constant { cpu: 1.0, mem: 1.0 }
            };
            WorkerProfile::cpu(i, rng.random_range(1.0..200.0), resources, rng.random())
        })
        .collect();
    Scenario {
        scheme: SchemeConfig::new(SchemeKind::Ssp, n, 16 * n as u64, threshold).unwrap(),
        workers,
        dataset: Arc::new(generate_dataset(rng.random(), 200, 4).unwrap()),
        learning_rate: 0.05,
        predictor: PredictorSettings::default(),
        convergence: Convergence {
            loss_threshold: 1e-12,
            consecutive: 1,
        },
        max_iterations: 200,
        seed: rng.random(),
        memory: MemoryModel::default(),
        speed_floor: 1e-3,
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut exceeded = 0;
    let mut largest_seen = 0;
    for _ in 0..200 {
        let threshold = rng.random_range(0..6);
        let out = run_training(&ssp_scenario(&mut rng, threshold), RunOptions::default()).unwrap();
        largest_seen = largest_seen.max(out.max_skew);
        if out.max_skew > threshold {
            exceeded += 1;
        }
    }
    let mut identical = true;
    for preset in [Preset::Homo, Preset::HeteroL2, Preset::HeteroL3] {
        let (bsp, _) = run(&preset_config(SchemeKind::Bsp, preset, 8), true);
        let (ssp, _) = run(&preset_config(SchemeKind::Ssp, preset, 8), true);
        identical &= bsp.trajectory == ssp.trajectory;
    }
    ensure(
        exceeded == 0 && identical,
        format!(
            "{exceeded} of 200 fuzzed timelines exceeded their threshold (largest skew {largest_seen}); threshold 0 {} BSP bit-for-bit",
            if identical { "matches" } else { "differs from" }
        ),
    )
}

fn criterion_9() -> Outcome {
    let configs = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut names = Vec::new();
    for entry in std::fs::read_dir(&configs).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.extension().is_some_and(|e| e == "json") {
            names.push(path);
        }
    }
    names.sort();
    let mut differing = Vec::new();
    for path in &names {
        let read = |tag: &str| {
            let out = dir.path().join(tag);
            cmd_run(path, &out, Some(42)).map_err(|e| format!("{}: {e:#}", path.display()))?;
            std::fs::read(out.join("records.csv")).map_err(|e| e.to_string())
        };
        if read("a")? != read("b")? {
            differing.push(path.display().to_string());
        }
    }
    ensure(
        differing.is_empty() && !names.is_empty(),
        format!("{} configs rerun with seed 42; differing: {differing:?}", names.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "weighted aggregation equals union gradient", criterion_1),
        (2, "BSP and LB-BSP statistical equivalence", criterion_2),
        (3, "hardware efficiency closed form", criterion_3),
        (4, "resource wastage", criterion_4),
        (5, "allocator optimality and conservation", criterion_5),
        (6, "predictor ordering", criterion_6),
        (7, "GPU adaptation to a bandwidth drop", criterion_7),
        (8, "SSP staleness bound", criterion_8),
        (9, "determinism", criterion_9),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} PASS ({name}): {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} FAIL ({name}): {detail} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
