//! Worker-adaptive batch sizing: split a global batch budget so that every
//! worker finishes its share at the same time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to predicted speeds before allocation (samples/second).
pub const DEFAULT_SPEED_FLOOR: f64 = 1e-3;

/// Linear compute-time model of one GPU.
///
/// Below the saturation point `x_s` the device is under-utilised and the time
/// is flat; above the out-of-memory point `x_o` the batch does not fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpuProfile {
    /// Seconds per sample.
    pub m: f64,
    /// Fixed seconds per iteration.
    pub b: f64,
    pub x_s: u64,
    pub x_o: u64,
}

impl GpuProfile {
    pub fn new(m: f64, b: f64, x_s: u64, x_o: u64) -> Result<Self> {
        let p = GpuProfile { m, b, x_s, x_o };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gpu slope m must be > 0, got {}",
                self.m
            )));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gpu intercept b must be >= 0, got {}",
                self.b
            )));
        }
        if self.x_s == 0 || self.x_s > self.x_o {
            return Err(Error::InvalidArgument(format!(
                "gpu bounds must satisfy 1 <= x_s <= x_o, got [{}, {}]",
                self.x_s, self.x_o
            )));
        }
        Ok(())
    }

    /// `m * max(x, x_s) + b`, failing past the out-of-memory point.
    pub fn compute_time(&self, x: u64) -> Result<f64> {
        if x > self.x_o {
            return Err(Error::OutOfMemory { x, x_o: self.x_o });
        }
        Ok(self.m * x.max(self.x_s) as f64 + self.b)
    }
}

/// Per-worker batch sizes summing to the global budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchAssignment {
    pub sizes: Vec<u64>,
    pub budget: u64,
}

impl BatchAssignment {
    pub fn total(&self) -> u64 {
        self.sizes.iter().sum()
    }
}

/// Replaces non-positive or non-finite predictions by `floor`.
pub fn clamp_speeds(speeds: &[f64], floor: f64) -> Vec<f64> {
    speeds
        .iter()
        .map(|&v| if v.is_finite() && v > floor { v } else { floor })
        .collect()
}

/// Slowest worker's compute time `max x_i / v_i`.
pub fn cpu_objective(sizes: &[u64], speeds: &[f64]) -> f64 {
    sizes
        .iter()
        .zip(speeds)
        .map(|(&x, &v)| x as f64 / v)
        .fold(0.0, f64::max)
}

/// Slowest worker's batch time `max m_i x_i + b_i + comm_i`.
pub fn gpu_objective(sizes: &[u64], profiles: &[GpuProfile], comm: &[f64]) -> f64 {
    sizes
        .iter()
        .zip(profiles)
        .zip(comm)
        .map(|((&x, p), &c)| p.m * x as f64 + p.b + c)
        .fold(0.0, f64::max)
}

fn check_cpu(speeds: &[f64], budget: u64) -> Result<()> {
    if speeds.is_empty() {
        return Err(Error::Empty("speed list"));
    }
    if let Some((i, v)) = speeds.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "speed of worker {i} must be > 0, got {v}"
        )));
    }
    if budget < speeds.len() as u64 {
        return Err(Error::InvalidArgument(format!(
            "budget {budget} is smaller than the worker count {}",
            speeds.len()
        )));
    }
    Ok(())
}

// Quotas within this distance of an integer are treated as that integer, and
// remainders are compared at this resolution, so tiny floating-point noise
// (e.g. from rescaling all speeds) cannot flip the rounding.
const QUOTA_SNAP: f64 = 1e-9;

/// Proportional split `x_i = v_i / sum(v) * X`, rounded by largest remainder.
///
/// Every worker receives at least one sample; a worker whose share rounds to
/// zero takes it from the worker furthest above its quota, which keeps sizes
/// ordered like speeds.
pub fn cpu_allocate(speeds: &[f64], budget: u64) -> Result<BatchAssignment> {
    check_cpu(speeds, budget)?;
    let total: f64 = speeds.iter().sum();
    let quotas: Vec<f64> = speeds
        .iter()
        .map(|v| {
            let q = v / total * budget as f64;
            let r = q.round();
            if (q - r).abs() <= QUOTA_SNAP * r.max(1.0) {
                r
            } else {
                q
            }
        })
        .collect();
    let mut sizes: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = sizes.iter().sum();
    let mut leftover = budget.saturating_sub(assigned);

    let mut order: Vec<usize> = (0..speeds.len()).collect();
    order.sort_by_key(|&i| {
        let rem = quotas[i] - quotas[i].floor();
        (std::cmp::Reverse((rem / QUOTA_SNAP).round() as i64), i)
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    // Rounding can only undershoot, but guard the sum anyway.
    while sizes.iter().sum::<u64>() > budget {
        let i = most_over_quota(&sizes, &quotas);
        sizes[i] -= 1;
    }

    while let Some(z) = sizes.iter().position(|&x| x == 0) {
        let donor = most_over_quota(&sizes, &quotas);
        sizes[donor] -= 1;
        sizes[z] += 1;
    }
    Ok(BatchAssignment { sizes, budget })
}

/// Index maximising `size - quota` among sizes above one; ties go to the
/// lower quota, then the lower index.
fn most_over_quota(sizes: &[u64], quotas: &[f64]) -> usize {
    let excess = |i: usize| sizes[i] as f64 - quotas[i];
    let mut best: Option<usize> = None;
    for i in (0..sizes.len()).filter(|&i| sizes[i] > 1) {
        best = match best {
            Some(b) if excess(i) > excess(b) || (excess(i) == excess(b) && quotas[i] < quotas[b]) => Some(i),
            None => Some(i),
            keep => keep,
        };
    }
    best.expect("budget >= worker count leaves a donor")
}

fn check_gpu(profiles: &[GpuProfile], comm: &[f64], budget: u64) -> Result<()> {
    if profiles.is_empty() {
        return Err(Error::Empty("gpu profile list"));
    }
    if comm.len() != profiles.len() {
        return Err(Error::DimensionMismatch {
            expected: profiles.len(),
            got: comm.len(),
        });
    }
    for p in profiles {
        p.validate()?;
    }
    if let Some((i, c)) = comm.iter().enumerate().find(|(_, c)| !(**c >= 0.0 && c.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "communication time of worker {i} must be >= 0, got {c}"
        )));
    }
    let min_total: u64 = profiles.iter().map(|p| p.x_s).sum();
    let max_total: u64 = profiles.iter().map(|p| p.x_o).sum();
    if budget < min_total {
        return Err(Error::Infeasible(format!(
            "budget {budget} is below the sum of saturation points {min_total}"
        )));
    }
    if budget > max_total {
        return Err(Error::Infeasible(format!(
            "budget {budget} exceeds the sum of out-of-memory points {max_total}"
        )));
    }
    Ok(())
}

/// Continuous relaxation: equalise `m_i x_i + b_i + comm_i` across workers
/// with each `x_i` clamped to `[x_s, x_o]`. Returns the real-valued sizes.
pub fn gpu_waterfill(profiles: &[GpuProfile], comm: &[f64], budget: u64) -> Result<Vec<f64>> {
    check_gpu(profiles, comm, budget)?;
    let target = budget as f64;
    let fill = |level: f64| -> Vec<f64> {
        profiles
            .iter()
            .zip(comm)
            .map(|(p, c)| ((level - p.b - c) / p.m).clamp(p.x_s as f64, p.x_o as f64))
            .collect()
    };
    let total_at = |level: f64| -> f64 { fill(level).iter().sum() };

    // Total allocation is piecewise linear in the level, with kinks where a
    // worker enters or leaves its feasible band.
    let mut kinks: Vec<f64> = profiles
        .iter()
        .zip(comm)
        .flat_map(|(p, c)| [p.m * p.x_s as f64 + p.b + c, p.m * p.x_o as f64 + p.b + c])
        .collect();
    kinks.sort_by(f64::total_cmp);
    kinks.dedup();

    let mut lo = kinks[0];
    let mut hi = *kinks.last().unwrap();
    for pair in kinks.windows(2) {
        if total_at(pair[1]) >= target {
            lo = pair[0];
            hi = pair[1];
            break;
        }
    }
    let (s_lo, s_hi) = (total_at(lo), total_at(hi));
    let level = if s_hi > s_lo {
        lo + (target - s_lo) * (hi - lo) / (s_hi - s_lo)
    } else {
        lo
    };
    Ok(fill(level))
}

/// Integer min-max allocation for GPU workers.
///
/// Starts from the floor of the continuous optimum and hands out the
/// remaining samples one at a time to the worker whose time after receiving
/// it is smallest.
pub fn gpu_allocate(profiles: &[GpuProfile], comm: &[f64], budget: u64) -> Result<BatchAssignment> {
    let relaxed = gpu_waterfill(profiles, comm, budget)?;
    let mut sizes: Vec<u64> = relaxed
        .iter()
        .zip(profiles)
        .map(|(x, p)| (x.floor() as u64).clamp(p.x_s, p.x_o))
        .collect();
    let mut assigned: u64 = sizes.iter().sum();
    while assigned > budget {
        // Only reachable through floating-point slop at the upper bounds.
        let i = (0..sizes.len())
            .filter(|&i| sizes[i] > profiles[i].x_s)
            .max_by(|&a, &b| {
                let ta = profiles[a].m * sizes[a] as f64 + profiles[a].b + comm[a];
                let tb = profiles[b].m * sizes[b] as f64 + profiles[b].b + comm[b];
                ta.total_cmp(&tb).then(b.cmp(&a))
            })
            .expect("feasible budget leaves a reducible worker");
        sizes[i] -= 1;
        assigned -= 1;
    }
    while assigned < budget {
        let i = (0..sizes.len())
            .filter(|&i| sizes[i] < profiles[i].x_o)
            .min_by(|&a, &b| {
                let ta = profiles[a].m * (sizes[a] + 1) as f64 + profiles[a].b + comm[a];
                let tb = profiles[b].m * (sizes[b] + 1) as f64 + profiles[b].b + comm[b];
                ta.total_cmp(&tb).then(a.cmp(&b))
            })
            .expect("feasible budget leaves an extensible worker");
        sizes[i] += 1;
        assigned += 1;
    }
    Ok(BatchAssignment { sizes, budget })
}

/// Instance description accepted by [`allocate_oracle`].
#[derive(Debug, Clone, PartialEq)]
pub enum OracleInstance {
    Cpu { speeds: Vec<f64> },
    Gpu { profiles: Vec<GpuProfile>, comm: Vec<f64> },
}

impl OracleInstance {
    pub fn objective(&self, sizes: &[u64]) -> f64 {
        match self {
            OracleInstance::Cpu { speeds } => cpu_objective(sizes, speeds),
            OracleInstance::Gpu { profiles, comm } => gpu_objective(sizes, profiles, comm),
        }
    }
}

pub const ORACLE_MAX_WORKERS: usize = 4;
pub const ORACLE_MAX_BUDGET: u64 = 200;

/// Worker count, per-worker size bounds and per-worker time at a given size.
type OracleSetup<'a> = (usize, Vec<(u64, u64)>, Box<dyn Fn(usize, u64) -> f64 + 'a>);

/// Exhaustive search over every integer composition of the budget.
/// Ties keep the lexicographically first composition.
pub fn allocate_oracle(instance: &OracleInstance, budget: u64) -> Result<BatchAssignment> {
    let (n, bounds, cost): OracleSetup = match instance {
        OracleInstance::Cpu { speeds } => {
            check_cpu(speeds, budget)?;
            let n = speeds.len();
            let hi = budget - (n as u64 - 1);
            (n, vec![(1, hi); n], Box::new(move |i, x| x as f64 / speeds[i]))
        }
        OracleInstance::Gpu { profiles, comm } => {
            check_gpu(profiles, comm, budget)?;
            let bounds = profiles.iter().map(|p| (p.x_s, p.x_o.min(budget))).collect();
            (
                profiles.len(),
                bounds,
                Box::new(move |i, x| profiles[i].m * x as f64 + profiles[i].b + comm[i]),
            )
        }
    };
    if n > ORACLE_MAX_WORKERS || budget > ORACLE_MAX_BUDGET {
        return Err(Error::InstanceTooLarge(format!(
            "{n} workers / budget {budget} (limits {ORACLE_MAX_WORKERS} / {ORACLE_MAX_BUDGET})"
        )));
    }

    // Minimum total still required by workers i.. for pruning.
    let mut min_suffix = vec![0u64; n + 1];
    let mut max_suffix = vec![0u64; n + 1];
    for i in (0..n).rev() {
        min_suffix[i] = min_suffix[i + 1] + bounds[i].0;
        max_suffix[i] = max_suffix[i + 1] + bounds[i].1;
    }

    struct Search<'a> {
        bounds: &'a [(u64, u64)],
        cost: &'a dyn Fn(usize, u64) -> f64,
        min_suffix: &'a [u64],
        max_suffix: &'a [u64],
        current: Vec<u64>,
        best: Option<(f64, Vec<u64>)>,
    }

    impl Search<'_> {
        fn go(&mut self, i: usize, remaining: u64, worst: f64) {
            let n = self.bounds.len();
            if let Some((b, _)) = &self.best {
                if worst >= *b {
                    return;
                }
            }
            if i + 1 == n {
                let x = remaining;
                if x < self.bounds[i].0 || x > self.bounds[i].1 {
                    return;
                }
                let w = worst.max((self.cost)(i, x));
                if self.best.as_ref().is_none_or(|(b, _)| w < *b) {
                    self.current[i] = x;
                    self.best = Some((w, self.current.clone()));
                }
                return;
            }
            let (lo, hi) = self.bounds[i];
            let rest_min = self.min_suffix[i + 1];
            let rest_max = self.max_suffix[i + 1];
            let lo = lo.max(remaining.saturating_sub(rest_max));
            let hi = hi.min(remaining.saturating_sub(rest_min));
            if lo > hi || remaining < rest_min {
                return;
            }
            for x in lo..=hi {
                self.current[i] = x;
                let w = worst.max((self.cost)(i, x));
                self.go(i + 1, remaining - x, w);
            }
        }
    }

    let mut search = Search {
        bounds: &bounds,
        cost: cost.as_ref(),
        min_suffix: &min_suffix,
        max_suffix: &max_suffix,
        current: vec![0; n],
        best: None,
    };
    search.go(0, budget, 0.0);
    let (_, sizes) = search
        .best
        .ok_or_else(|| Error::Infeasible("no composition satisfies the bounds".into()))?;
    Ok(BatchAssignment { sizes, budget })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportional_split_is_exact_when_divisible() {
        let a = cpu_allocate(&[4.0, 2.0, 1.0, 1.0], 512).unwrap();
        assert_eq!(a.sizes, vec![256, 128, 64, 64]);
        let speeds = [4.0, 2.0, 1.0, 1.0];
        for (x, v) in a.sizes.iter().zip(speeds) {
            assert_eq!(*x as f64 / v, 64.0);
        }
        let eq = cpu_allocate(&[1.0; 4], 512).unwrap();
        assert_eq!(eq.sizes, vec![128; 4]);
    }

    #[test]
    fn small_cpu_instance_matches_exhaustive_optimum() {
        let speeds = [3.0, 2.0, 2.0];
        let a = cpu_allocate(&speeds, 10).unwrap();
        assert_eq!(a.total(), 10);
        // Enumerate every composition of 10 into three positive parts.
        let mut best = f64::INFINITY;
        for x0 in 1..=8u64 {
            for x1 in 1..=(9 - x0) {
                let x2 = 10 - x0 - x1;
                best = best.min(cpu_objective(&[x0, x1, x2], &speeds));
            }
        }
        assert_eq!(best, 1.5);
        assert_eq!(cpu_objective(&a.sizes, &speeds), best);
    }

    #[test]
    fn cpu_rejects_bad_input() {
        assert!(cpu_allocate(&[1.0, 0.0], 10).is_err());
        assert!(cpu_allocate(&[1.0, -2.0], 10).is_err());
        assert!(cpu_allocate(&[1.0, 1.0, 1.0], 2).is_err());
        assert!(cpu_allocate(&[], 2).is_err());
    }

    #[test]
    fn every_cpu_worker_gets_at_least_one_sample() {
        let a = cpu_allocate(&[1000.0, 1.0, 1.0], 10).unwrap();
        assert_eq!(a.total(), 10);
        assert!(a.sizes.iter().all(|&x| x >= 1));
        assert_eq!(a.sizes, vec![8, 1, 1]);
    }

    #[test]
    fn clamp_replaces_pathological_predictions() {
        assert_eq!(
            clamp_speeds(&[2.0, 0.0, -1.0, f64::NAN], 1e-3),
            vec![2.0, 1e-3, 1e-3, 1e-3]
        );
    }

    #[test]
    fn gpu_two_worker_equalisation() {
        let profiles = [
            GpuProfile::new(0.01, 0.1, 1, 10_000).unwrap(),
            GpuProfile::new(0.005, 0.1, 1, 10_000).unwrap(),
        ];
        let relaxed = gpu_waterfill(&profiles, &[0.0, 0.0], 759).unwrap();
        assert!((relaxed[0] - 253.0).abs() < 1e-9);
        assert!((relaxed[1] - 506.0).abs() < 1e-9);
        let a = gpu_allocate(&profiles, &[0.0, 0.0], 759).unwrap();
        assert_eq!(a.total(), 759);
        assert!(a.sizes[0].abs_diff(253) <= 1 && a.sizes[1].abs_diff(506) <= 1);
        assert!((gpu_objective(&a.sizes, &profiles, &[0.0, 0.0]) - 2.63).abs() < 0.011);
    }

    #[test]
    fn gpu_single_worker_takes_everything() {
        let p = [GpuProfile::new(0.002, 0.05, 58, 384).unwrap()];
        assert_eq!(gpu_allocate(&p, &[0.1], 300).unwrap().sizes, vec![300]);
        assert!(gpu_allocate(&p, &[0.1], 385).is_err());
        assert!(gpu_allocate(&p, &[0.1], 57).is_err());
    }

    #[test]
    fn gpu_symmetric_profiles_split_evenly() {
        let p = GpuProfile::new(0.002, 0.05, 10, 500).unwrap();
        let a = gpu_allocate(&[p; 4], &[0.2; 4], 400).unwrap();
        assert_eq!(a.sizes, vec![100; 4]);
    }

    #[test]
    fn gpu_infeasibility_names_the_bound() {
        let profiles = [
            GpuProfile::new(0.002, 0.05, 58, 384).unwrap(),
            GpuProfile::new(0.001, 0.05, 92, 1184).unwrap(),
            GpuProfile::new(0.0008, 0.05, 103, 788).unwrap(),
        ];
        let low = gpu_allocate(&profiles, &[0.0; 3], 200).unwrap_err().to_string();
        assert!(low.contains("saturation"), "{low}");
        let high = gpu_allocate(&profiles, &[0.0; 3], 3000).unwrap_err().to_string();
        assert!(high.contains("out-of-memory"), "{high}");
        let oracle = allocate_oracle(
            &OracleInstance::Gpu {
                profiles: profiles.to_vec(),
                comm: vec![0.0; 3],
            },
            200,
        );
        assert!(matches!(oracle, Err(Error::Infeasible(_))));
    }

    #[test]
    fn gpu_compute_time_plateau_and_oom() {
        let p = GpuProfile::new(0.002, 0.05, 58, 384).unwrap();
        assert_eq!(p.compute_time(58).unwrap(), p.compute_time(29).unwrap());
        assert!((p.compute_time(384).unwrap() - (0.002 * 384.0 + 0.05)).abs() < 1e-15);
        assert!(matches!(
            p.compute_time(385),
            Err(Error::OutOfMemory { x: 385, x_o: 384 })
        ));
        assert!((p.compute_time(235).unwrap() - 0.52).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let big = OracleInstance::Cpu { speeds: vec![1.0; 5] };
        assert!(matches!(allocate_oracle(&big, 20), Err(Error::InstanceTooLarge(_))));
        let wide = OracleInstance::Cpu { speeds: vec![1.0; 2] };
        assert!(matches!(allocate_oracle(&wide, 201), Err(Error::InstanceTooLarge(_))));
    }

    #[test]
    fn oracle_finds_known_optimum() {
        let inst = OracleInstance::Cpu {
            speeds: vec![4.0, 2.0, 1.0, 1.0],
        };
        let a = allocate_oracle(&inst, 16).unwrap();
        assert_eq!(a.sizes, vec![8, 4, 2, 2]);
    }
}
