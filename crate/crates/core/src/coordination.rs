//! Parameter-server side of the four worker-coordination schemes.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sgd::{Gradient, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Bsp,
    Asp,
    Ssp,
    #[serde(alias = "lb-bsp", alias = "lbbsp")]
    LbBsp,
}

impl SchemeKind {
    pub fn is_synchronous(self) -> bool {
        matches!(self, SchemeKind::Bsp | SchemeKind::LbBsp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::Bsp => "bsp",
            SchemeKind::Asp => "asp",
            SchemeKind::Ssp => "ssp",
            SchemeKind::LbBsp => "lb_bsp",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bsp" => Ok(SchemeKind::Bsp),
            "asp" => Ok(SchemeKind::Asp),
            "ssp" => Ok(SchemeKind::Ssp),
            "lb_bsp" | "lb-bsp" | "lbbsp" => Ok(SchemeKind::LbBsp),
            other => Err(Error::InvalidArgument(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    /// Only consulted by SSP.
    pub staleness_threshold: u64,
    /// Global batch budget `X` shared by all workers in one iteration.
    pub total_budget: u64,
    pub workers: usize,
}

impl SchemeConfig {
    pub fn new(kind: SchemeKind, workers: usize, total_budget: u64, staleness_threshold: u64) -> Result<Self> {
        if workers == 0 {
            return Err(Error::InvalidArgument("at least one worker is required".into()));
        }
        if total_budget < workers as u64 {
            return Err(Error::InvalidArgument(format!(
                "budget {total_budget} is smaller than the worker count {workers}"
            )));
        }
        Ok(SchemeConfig {
            kind,
            staleness_threshold,
            total_budget,
            workers,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingUpdate {
    pub worker_id: usize,
    pub gradient: Gradient,
    /// Iteration index (on that worker) the gradient was computed for.
    pub worker_clock: u64,
}

fn canonical_order(a: &Gradient, b: &Gradient) -> Ordering {
    a.batch_size.cmp(&b.batch_size).then_with(|| {
        a.values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

fn check_dims(grads: &[&Gradient]) -> Result<usize> {
    let dim = grads.first().ok_or(Error::Empty("gradient list"))?.dim();
    for g in grads {
        if g.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: g.dim(),
            });
        }
    }
    Ok(dim)
}

/// Unweighted mean of worker gradients; the result's batch size is the total.
///
/// Summation runs in a canonical order, so the result does not depend on the
/// order of `grads`.
pub fn aggregate_naive(grads: &[Gradient]) -> Result<Gradient> {
    let mut refs: Vec<&Gradient> = grads.iter().collect();
    let dim = check_dims(&refs)?;
    refs.sort_by(|a, b| canonical_order(a, b));
    let mut values = vec![0.0; dim];
    for g in &refs {
        for (acc, v) in values.iter_mut().zip(&g.values) {
            *acc += v;
        }
    }
    let n = refs.len() as f64;
    for v in &mut values {
        *v /= n;
    }
    Ok(Gradient {
        values,
        batch_size: refs.iter().map(|g| g.batch_size).sum(),
    })
}

/// Batch-size-weighted mean: every sample behind the aggregate carries equal weight.
pub fn aggregate_weighted(grads: &[Gradient]) -> Result<Gradient> {
    let mut refs: Vec<&Gradient> = grads.iter().collect();
    let dim = check_dims(&refs)?;
    if let Some(g) = refs.iter().find(|g| g.batch_size == 0) {
        return Err(Error::InvalidArgument(format!(
            "gradient with batch size 0 cannot be weighted (dim {})",
            g.dim()
        )));
    }
    refs.sort_by(|a, b| canonical_order(a, b));
    let total: u64 = refs.iter().map(|g| g.batch_size).sum();
    let mut values = vec![0.0; dim];
    for g in &refs {
        let w = g.batch_size as f64;
        for (acc, v) in values.iter_mut().zip(&g.values) {
            *acc += w * v;
        }
    }
    let total_f = total as f64;
    for v in &mut values {
        *v /= total_f;
    }
    Ok(Gradient {
        values,
        batch_size: total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Proceed,
    Wait,
}

/// A worker about to start iteration `worker_clock` may proceed while it is at
/// most `staleness_threshold` iterations ahead of the slowest worker.
pub fn ssp_gate(worker_clock: u64, min_worker_clock: u64, staleness_threshold: u64) -> Gate {
    if worker_clock.saturating_sub(min_worker_clock) <= staleness_threshold {
        Gate::Proceed
    } else {
        Gate::Wait
    }
}

fn sorted_by_worker(ready: &[PendingUpdate]) -> Vec<&PendingUpdate> {
    let mut v: Vec<&PendingUpdate> = ready.iter().collect();
    v.sort_by_key(|u| u.worker_id);
    v
}

/// One parameter-server iteration.
///
/// * BSP / LB-BSP: `ready` must hold exactly one update per worker; the
///   aggregate (naive resp. weighted) is applied once.
/// * ASP: every update is applied on its own, in ascending worker order; the
///   clock advances once per update.
/// * SSP: `ready` is the set of updates completing one clock; their naive
///   average is applied once.
pub fn ps_step(scheme: &SchemeConfig, model: &ModelState, ready: &[PendingUpdate]) -> Result<ModelState> {
    if ready.is_empty() {
        return Err(Error::Empty("ready update set"));
    }
    let ordered = sorted_by_worker(ready);
    match scheme.kind {
        SchemeKind::Bsp | SchemeKind::LbBsp => {
            let mut seen = vec![false; scheme.workers];
            for u in &ordered {
                match seen.get_mut(u.worker_id) {
                    Some(slot) if !*slot => *slot = true,
                    _ => return Err(Error::UnexpectedWorker(u.worker_id)),
                }
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::MissingWorker(missing));
            }
            let grads: Vec<Gradient> = ordered.iter().map(|u| u.gradient.clone()).collect();
            let agg = if scheme.kind == SchemeKind::LbBsp {
                aggregate_weighted(&grads)?
            } else {
                aggregate_naive(&grads)?
            };
            model.apply_update(&agg)
        }
        SchemeKind::Asp => {
            let mut next = model.clone();
            for u in ordered {
                if u.worker_id >= scheme.workers {
                    return Err(Error::UnexpectedWorker(u.worker_id));
                }
                next.apply_update_in_place(&u.gradient)?;
            }
            Ok(next)
        }
        SchemeKind::Ssp => {
            if let Some(u) = ordered.iter().find(|u| u.worker_id >= scheme.workers) {
                return Err(Error::UnexpectedWorker(u.worker_id));
            }
            let grads: Vec<Gradient> = ordered.iter().map(|u| u.gradient.clone()).collect();
            model.apply_update(&aggregate_naive(&grads)?)
        }
    }
}

/// SSP parameter server with per-clock buffering.
///
/// Updates for clock `c` are committed (naive average, one step) once every
/// worker has pushed clock `c`. Readers see the committed parameters minus the
/// share `eta/n * g` of every update pushed for a not-yet-complete clock, so a
/// fast worker observes its peers' fresh progress. With threshold 0 nobody can
/// read while a clock is partially pushed and the committed sequence is exactly
/// the BSP sequence.
#[derive(Debug, Clone)]
pub struct SspServer {
    scheme: SchemeConfig,
    committed: ModelState,
    pending: BTreeMap<u64, Vec<PendingUpdate>>,
    /// Completed iterations per worker.
    completed: Vec<u64>,
}

impl SspServer {
    pub fn new(scheme: SchemeConfig, model: ModelState) -> Self {
        SspServer {
            completed: vec![0; scheme.workers],
            scheme,
            committed: model,
            pending: BTreeMap::new(),
        }
    }

    pub fn committed(&self) -> &ModelState {
        &self.committed
    }

    pub fn completed(&self, worker: usize) -> u64 {
        self.completed[worker]
    }

    pub fn min_clock(&self) -> u64 {
        self.completed.iter().copied().min().unwrap_or(0)
    }

    pub fn max_clock(&self) -> u64 {
        self.completed.iter().copied().max().unwrap_or(0)
    }

    /// Whether `worker` may start its next iteration now.
    pub fn gate(&self, worker: usize) -> Gate {
        ssp_gate(
            self.completed[worker],
            self.min_clock(),
            self.scheme.staleness_threshold,
        )
    }

    /// Parameters a worker reads when it starts an iteration.
    pub fn read_view(&self) -> Vec<f64> {
        let mut params = self.committed.params.clone();
        if self.pending.is_empty() {
            return params;
        }
        let scale = self.committed.learning_rate / self.scheme.workers as f64;
        for u in self.pending.values().flatten() {
            for (p, g) in params.iter_mut().zip(&u.gradient.values) {
                *p -= scale * g;
            }
        }
        params
    }

    /// Accepts one update and returns the clocks committed as a result.
    pub fn push(&mut self, update: PendingUpdate) -> Result<Vec<u64>> {
        let w = update.worker_id;
        if w >= self.scheme.workers {
            return Err(Error::UnexpectedWorker(w));
        }
        if update.worker_clock != self.completed[w] {
            return Err(Error::InvalidArgument(format!(
                "worker {w} pushed clock {} but has completed {}",
                update.worker_clock, self.completed[w]
            )));
        }
        if update.gradient.dim() != self.committed.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.committed.dim(),
                got: update.gradient.dim(),
            });
        }
        self.completed[w] += 1;
        self.pending.entry(update.worker_clock).or_default().push(update);

        let mut committed = Vec::new();
        while let Some(entry) = self.pending.first_entry() {
            if entry.get().len() < self.scheme.workers {
                break;
            }
            let clock = *entry.key();
            let ready = entry.remove();
            self.committed = ps_step(&self.scheme, &self.committed, &ready)?;
            committed.push(clock);
        }
        Ok(committed)
    }
}
