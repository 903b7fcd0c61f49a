//! Deterministic discrete-event simulation of a parameter server and its
//! workers under BSP, ASP, SSP and LB-BSP.
//!
//! Time is simulated: a CPU worker needs `x / v` seconds for `x` samples at
//! speed `v`, a GPU worker needs `Γ(x)`, and every iteration adds the worker's
//! communication time. Predictors only ever see past observations, so
//! prediction error shows up as real imbalance at the barrier.

use std::collections::{BTreeMap, VecDeque};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coordination::{ps_step, Gate, PendingUpdate, SchemeConfig, SchemeKind, SspServer};
use crate::error::{Error, Result};
use crate::predictor::{Ema, NarxModel, NarxTraining, PredictorKind, SpeedPredictor};
use crate::sgd::{batch_gradient_at, loss_at, Dataset, Gradient, ModelState};
use crate::sizer::{clamp_speeds, cpu_allocate, gpu_allocate, GpuProfile};
use crate::trace::{trace_at, ResourceTrace};

/// SplitMix64 finaliser over two words; derives independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Speed loss from memory pressure: no penalty at or above `threshold`,
/// linear down to `floor` at zero availability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub threshold: f64,
    pub floor: f64,
}

impl Default for MemoryModel {
    fn default() -> Self {
        MemoryModel {
            threshold: 0.3,
            floor: 0.2,
        }
    }
}

impl MemoryModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "memory threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.floor) {
            return Err(Error::InvalidArgument(format!(
                "memory penalty floor must be in [0, 1], got {}",
                self.floor
            )));
        }
        Ok(())
    }

    pub fn penalty(&self, mem_avail: f64) -> f64 {
        if mem_avail >= self.threshold {
            1.0
        } else {
            self.floor + (1.0 - self.floor) * mem_avail.max(0.0) / self.threshold
        }
    }
}

/// `v0 * cpu_avail * penalty(mem_avail)`.
pub fn effective_speed(base_speed: f64, cpu_avail: f64, mem_avail: f64, memory: &MemoryModel) -> f64 {
    base_speed * cpu_avail * memory.penalty(mem_avail)
}

pub fn gpu_compute_time(profile: &GpuProfile, x: u64) -> Result<f64> {
    if x == 0 {
        return Err(Error::InvalidArgument("gpu batch must be >= 1".into()));
    }
    profile.compute_time(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthEvent {
    pub at_iteration: u64,
    /// Multiplier on communication time from `at_iteration` on (3.0 = a 3x bandwidth drop).
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CommModel {
    pub base_s: f64,
    pub events: Vec<BandwidthEvent>,
}

impl CommModel {
    pub fn constant(base_s: f64) -> Self {
        CommModel {
            base_s,
            events: Vec::new(),
        }
    }

    pub fn time_at(&self, iteration: u64) -> f64 {
        self.events
            .iter()
            .filter(|e| e.at_iteration <= iteration)
            .fold(self.base_s, |t, e| t * e.factor)
    }
}

/// A competing process that, every `period` iterations, runs with probability
/// `on_probability` and otherwise sleeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StragglerSpec {
    pub on_probability: f64,
    pub cpu_consumed: f64,
    pub mem_consumed: f64,
    pub period: u64,
}

impl StragglerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.on_probability) {
            return Err(Error::InvalidArgument(format!(
                "on_probability must be in [0, 1], got {}",
                self.on_probability
            )));
        }
        for (name, f) in [("cpu_consumed", self.cpu_consumed), ("mem_consumed", self.mem_consumed)] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0, 1), got {f}")));
            }
        }
        if self.period == 0 {
            return Err(Error::InvalidArgument("straggler period must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_on(&self, seed: u64, iteration: u64) -> bool {
        let block = iteration / self.period;
        ChaCha8Rng::seed_from_u64(mix_seed(seed, block)).random_bool(self.on_probability)
    }

    pub fn sample(&self, seed: u64, iteration: u64) -> ResourceSample {
        if self.is_on(seed, iteration) {
            ResourceSample::new(1.0 - self.cpu_consumed, 1.0 - self.mem_consumed)
        } else {
            ResourceSample::new(1.0, 1.0)
        }
    }
}

/// Resources granted to a worker for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub cpu: f64,
    pub mem: f64,
    /// Transient multiplier on speed not explained by `cpu`/`mem` (1 = none).
    pub speed_factor: f64,
}

impl ResourceSample {
    pub fn new(cpu: f64, mem: f64) -> Self {
        ResourceSample {
            cpu,
            mem,
            speed_factor: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResourceSource {
    Constant {
        cpu: f64,
        mem: f64,
    },
    Straggler(StragglerSpec),
    /// Indexed by the worker's iteration; the last sample repeats.
    Series(Arc<Vec<ResourceSample>>),
    /// Queried at the simulated time the iteration starts.
    Trace(Arc<ResourceTrace>),
}

impl ResourceSource {
    pub fn sample(&self, seed: u64, iteration: u64, time: f64) -> Result<ResourceSample> {
        match self {
            ResourceSource::Constant { cpu, mem } => Ok(ResourceSample::new(*cpu, *mem)),
            ResourceSource::Straggler(spec) => Ok(spec.sample(seed, iteration)),
            ResourceSource::Series(series) => {
                let last = series.len().checked_sub(1).ok_or(Error::Empty("resource series"))?;
                Ok(series[(iteration as usize).min(last)])
            }
            ResourceSource::Trace(trace) => {
                let (cpu, mem) = trace_at(trace, time)?;
                Ok(ResourceSample::new(cpu, mem))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComputeModel {
    Cpu { base_speed: f64 },
    Gpu(GpuProfile),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerProfile {
    pub id: usize,
    pub compute: ComputeModel,
    pub comm: CommModel,
    /// Ignored by GPU workers.
    pub resources: ResourceSource,
    /// Seeds the worker's straggler draws and predictor initialisation.
    pub seed: u64,
}

impl WorkerProfile {
    pub fn cpu(id: usize, base_speed: f64, resources: ResourceSource, seed: u64) -> Self {
        WorkerProfile {
            id,
            compute: ComputeModel::Cpu { base_speed },
            comm: CommModel::default(),
            resources,
            seed,
        }
    }

    pub fn gpu(id: usize, profile: GpuProfile, comm: CommModel, seed: u64) -> Self {
        WorkerProfile {
            id,
            compute: ComputeModel::Gpu(profile),
            comm,
            resources: ResourceSource::Constant { cpu: 1.0, mem: 1.0 },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.compute {
            ComputeModel::Cpu { base_speed } if !(base_speed > 0.0 && base_speed.is_finite()) => {
                return Err(Error::InvalidArgument(format!(
                    "worker {}: base speed must be > 0, got {base_speed}",
                    self.id
                )));
            }
            ComputeModel::Gpu(p) => p.validate()?,
            _ => {}
        }
        if !(self.comm.base_s >= 0.0 && self.comm.base_s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "worker {}: communication time must be >= 0, got {}",
                self.id, self.comm.base_s
            )));
        }
        if let Some(e) = self
            .comm
            .events
            .iter()
            .find(|e| !(e.factor > 0.0 && e.factor.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "worker {}: bandwidth factor must be > 0, got {}",
                self.id, e.factor
            )));
        }
        if let ResourceSource::Straggler(spec) = &self.resources {
            spec.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Homo,
    #[serde(alias = "hetero-l2")]
    HeteroL2,
    #[serde(alias = "hetero-l3")]
    HeteroL3,
}

impl Preset {
    /// Time-averaged slowest/fastest speed ratio the preset is tuned to.
    pub fn target_ratio(self) -> f64 {
        match self {
            Preset::Homo => 1.0,
            Preset::HeteroL2 => 0.5,
            Preset::HeteroL3 => 1.0 / 3.0,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "homo" => Ok(Preset::Homo),
            "hetero_l2" => Ok(Preset::HeteroL2),
            "hetero_l3" => Ok(Preset::HeteroL3),
            other => Err(Error::InvalidArgument(format!("unknown preset `{other}`"))),
        }
    }
}

pub const PRESET_ON_PROBABILITY: f64 = 0.95;
pub const PRESET_PERIOD: u64 = 5;
/// Memory taken by the heaviest competing process; stays above the default penalty threshold.
pub const PRESET_MAX_MEM_CONSUMED: f64 = 0.2;

/// CPU workers with competing processes whose CPU share is spread evenly
/// from 0 to `f_max` across workers (in seeded random order).
///
/// A worker whose process takes `f` with on-probability `p` averages speed
/// `v0 * (1 - p f)`, and the fastest has `f = 0`, so `f_max = (1 - r) / p`
/// gives a time-averaged slowest/fastest ratio of `r`. With `static_speeds`
/// the process always runs (`p = 1`).
pub fn heterogeneity_preset(
    preset: Preset,
    n: usize,
    base_speed: f64,
    static_speeds: bool,
    seed: u64,
) -> Result<Vec<WorkerProfile>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "a heterogeneity preset needs >= 2 workers, got {n}"
        )));
    }
    let p = if static_speeds { 1.0 } else { PRESET_ON_PROBABILITY };
    let f_max = (1.0 - preset.target_ratio()) / p;
    let mut shares: Vec<f64> = (0..n).map(|i| f_max * i as f64 / (n - 1) as f64).collect();
    shares.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let workers = shares
        .into_iter()
        .enumerate()
        .map(|(id, f)| {
            let resources = if preset == Preset::Homo {
                ResourceSource::Constant { cpu: 1.0, mem: 1.0 }
            } else {
                ResourceSource::Straggler(StragglerSpec {
                    on_probability: p,
                    cpu_consumed: f,
                    mem_consumed: PRESET_MAX_MEM_CONSUMED * f / f_max.max(f64::MIN_POSITIVE),
                    period: PRESET_PERIOD,
                })
            };
            WorkerProfile::cpu(id, base_speed, resources, mix_seed(seed, id as u64 + 1))
        })
        .collect();
    Ok(workers)
}

/// Synthetic single-machine resource series used to compare predictors.
///
/// CPU availability follows regime `levels` (switching at `shifts`) times a
/// competing process that toggles on/off (taking `toggle_consumed` of the
/// CPU) with per-iteration switch probability `toggle_switch_probability`.
/// Independently, each iteration is a `spike_factor` speed spike with
/// probability `spike_probability`, invisible in CPU/memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkTrace {
    pub iterations: usize,
    pub levels: Vec<f64>,
    pub shifts: Vec<usize>,
    pub spike_probability: f64,
    pub spike_factor: f64,
    pub toggle_consumed: f64,
    pub toggle_switch_probability: f64,
    pub mem_avail: f64,
    pub seed: u64,
}

impl Default for BenchmarkTrace {
    fn default() -> Self {
        BenchmarkTrace {
            iterations: 1200,
            levels: vec![1.0, 0.5, 0.8],
            shifts: vec![400, 800],
            spike_probability: 0.02,
            spike_factor: 3.0,
            toggle_consumed: 0.4,
            toggle_switch_probability: 0.15,
            mem_avail: 0.9,
            seed: 1,
        }
    }
}

impl BenchmarkTrace {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != self.shifts.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "benchmark trace needs one more level than shifts, got {} levels and {} shifts",
                self.levels.len(),
                self.shifts.len()
            )));
        }
        if self.levels.iter().any(|l| !(*l > 0.0 && *l <= 1.0)) {
            return Err(Error::InvalidArgument("benchmark levels must be in (0, 1]".into()));
        }
        if self.shifts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "benchmark shifts must be strictly increasing".into(),
            ));
        }
        for (name, p) in [
            ("spike_probability", self.spike_probability),
            ("toggle_switch_probability", self.toggle_switch_probability),
            ("mem_avail", self.mem_avail),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.toggle_consumed) {
            return Err(Error::InvalidArgument(format!(
                "toggle_consumed must be in [0, 1), got {}",
                self.toggle_consumed
            )));
        }
        if !(self.spike_factor > 0.0) {
            return Err(Error::InvalidArgument("spike_factor must be > 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("benchmark trace needs >= 1 iteration".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Vec<ResourceSample>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut toggle_on = false;
        let series = (0..self.iterations)
            .map(|k| {
                let level = self.levels[self.shifts.partition_point(|&s| s <= k)];
                if rng.random_bool(self.toggle_switch_probability) {
                    toggle_on = !toggle_on;
                }
                let spike = rng.random_bool(self.spike_probability);
                let cpu = if toggle_on {
                    level * (1.0 - self.toggle_consumed)
                } else {
                    level
                };
                ResourceSample {
                    cpu,
                    mem: self.mem_avail,
                    speed_factor: if spike { self.spike_factor } else { 1.0 },
                }
            })
            .collect();
        Ok(series)
    }
}

/// RMSE of each predictor's one-step-ahead speed prediction over a resource
/// series, scored from iteration `score_from` on.
#[allow(clippy::too_many_arguments)]
pub fn predictor_rmse(
    series: &[ResourceSample],
    base_speed: f64,
    kind: PredictorKind,
    alpha: f64,
    training: &NarxTraining,
    memory: &MemoryModel,
    score_from: usize,
    seed: u64,
) -> Result<f64> {
    let mut predictor = SpeedPredictor::new(kind, alpha, *training, base_speed, seed)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, s) in series.iter().enumerate() {
        let actual = effective_speed(base_speed, s.cpu, s.mem, memory) * s.speed_factor;
        let predicted = predictor.predict(s.cpu, s.mem, actual);
        if k >= score_from {
            sum += (predicted - actual).powi(2);
            count += 1;
        }
        predictor.observe(actual, s.cpu, s.mem);
        predictor.train();
    }
    if count == 0 {
        return Err(Error::Empty("scored iterations"));
    }
    Ok((sum / count as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSettings {
    pub kind: PredictorKind,
    pub alpha: f64,
    pub training: NarxTraining,
    pub initial_model: Option<NarxModel>,
}

impl Default for PredictorSettings {
    fn default() -> Self {
        PredictorSettings {
            kind: PredictorKind::Ema,
            alpha: crate::predictor::DEFAULT_EMA_ALPHA,
            training: NarxTraining::default(),
            initial_model: None,
        }
    }
}

/// Converged once the loss stays below `loss_threshold` for `consecutive` updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub loss_threshold: f64,
    pub consecutive: u64,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence {
            loss_threshold: 0.6,
            consecutive: 10,
        }
    }
}

/// Fully resolved simulation input.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub scheme: SchemeConfig,
    pub workers: Vec<WorkerProfile>,
    pub dataset: Arc<Dataset>,
    pub learning_rate: f64,
    pub predictor: PredictorSettings,
    pub convergence: Convergence,
    pub max_iterations: u64,
    pub seed: u64,
    pub memory: MemoryModel,
    pub speed_floor: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.workers.len() != self.scheme.workers {
            return Err(Error::InvalidArgument(format!(
                "scheme expects {} workers but {} profiles were given",
                self.scheme.workers,
                self.workers.len()
            )));
        }
        for (i, w) in self.workers.iter().enumerate() {
            if w.id != i {
                return Err(Error::InvalidArgument(format!(
                    "worker at position {i} has id {}",
                    w.id
                )));
            }
            w.validate()?;
        }
        let gpus = self
            .workers
            .iter()
            .filter(|w| matches!(w.compute, ComputeModel::Gpu(_)))
            .count();
        if gpus != 0 && gpus != self.workers.len() {
            return Err(Error::InvalidArgument("workers must be all CPU or all GPU".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.speed_floor > 0.0) {
            return Err(Error::InvalidArgument("speed floor must be > 0".into()));
        }
        self.memory.validate()
    }

    pub fn is_gpu(&self) -> bool {
        matches!(self.workers.first().map(|w| w.compute), Some(ComputeModel::Gpu(_)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub worker_id: usize,
    pub x: u64,
    pub tp_s: f64,
    pub tm_s: f64,
    pub wait_s: f64,
    pub v_pred: f64,
    pub v_actual: f64,
}

/// One applied update: a synchronous iteration, an SSP clock, or a single ASP push.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: u64,
    pub workers: Vec<WorkerRecord>,
    pub grad_norm: f64,
    /// Training loss after the update.
    pub loss: f64,
    pub iter_wall_s: f64,
}

/// Splits `total` as evenly as possible, remainder to the lowest ids.
pub fn equal_split(total: u64, n: usize) -> Vec<u64> {
    let n64 = n as u64;
    (0..n64).map(|i| total / n64 + u64::from(i < total % n64)).collect()
}

/// Sample indices `offset..offset + len` of the global stream for iteration `j`.
///
/// Every scheme draws its batches from this stream, so BSP and LB-BSP see the
/// same samples per iteration no matter how they are partitioned.
fn stream_chunk(seed: u64, j: u64, offset: u64, len: u64, dataset_len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, j));
    for _ in 0..offset {
        rng.random_range(0..dataset_len);
    }
    (0..len).map(|_| rng.random_range(0..dataset_len)).collect()
}

#[derive(Debug, Clone)]
struct InFlight {
    iteration: u64,
    finish: f64,
    wait_before: f64,
    record: WorkerRecord,
    gradient: Gradient,
    resources: ResourceSample,
}

#[derive(Debug, Clone)]
struct AsyncState {
    running: Vec<Option<InFlight>>,
    blocked_since: Vec<Option<f64>>,
    /// Iteration index each worker is running or last ran.
    started: Vec<u64>,
    /// SSP rows waiting for their clock to commit.
    rows: BTreeMap<u64, Vec<WorkerRecord>>,
    last_event: f64,
}

/// Step-by-step simulator; each [`Simulation::step`] yields one applied update.
#[derive(Debug, Clone)]
pub struct Simulation {
    sc: Scenario,
    model: ModelState,
    ssp: Option<SspServer>,
    predictors: Vec<SpeedPredictor>,
    comm_ema: Vec<Ema>,
    time: f64,
    updates: u64,
    train_cursor: usize,
    /// GPU sizes computed one iteration ahead.
    queued_sizes: Option<Vec<u64>>,
    asynchronous: Option<AsyncState>,
    ready: VecDeque<IterationRecord>,
    max_skew: u64,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.validate()?;
        let dim = scenario.dataset.dim();
        let model = ModelState::zeros(dim, scenario.learning_rate)?;
        let predictors = scenario
            .workers
            .iter()
            .map(|w| {
                let prior = match w.compute {
                    ComputeModel::Cpu { base_speed } => base_speed,
                    ComputeModel::Gpu(_) => 1.0,
                };
                let s = &scenario.predictor;
                let p = SpeedPredictor::new(s.kind, s.alpha, s.training, prior, mix_seed(scenario.seed, w.seed))?;
                Ok(match &s.initial_model {
                    Some(m) => p.with_initial_model(m.clone()),
                    None => p,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let comm_ema = (0..scenario.workers.len())
            .map(|_| Ema::new(scenario.predictor.alpha))
            .collect::<Result<Vec<_>>>()?;
        let ssp = (scenario.scheme.kind == SchemeKind::Ssp).then(|| SspServer::new(scenario.scheme, model.clone()));
        let mut sim = Simulation {
            sc: scenario,
            model,
            ssp,
            predictors,
            comm_ema,
            time: 0.0,
            updates: 0,
            train_cursor: 0,
            queued_sizes: None,
            asynchronous: None,
            ready: VecDeque::new(),
            max_skew: 0,
        };
        if !sim.sc.scheme.kind.is_synchronous() {
            let n = sim.sc.workers.len();
            sim.asynchronous = Some(AsyncState {
                running: vec![None; n],
                blocked_since: vec![None; n],
                started: vec![0; n],
                rows: BTreeMap::new(),
                last_event: 0.0,
            });
            for w in 0..n {
                sim.start_async(w, 0, 0.0, 0.0)?;
            }
            sim.note_skew();
        }
        Ok(sim)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.sc
    }

    /// Parameters of the latest applied update.
    pub fn params(&self) -> &[f64] {
        match &self.ssp {
            Some(server) => &server.committed().params,
            None => &self.model.params,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Largest spread of iteration indices among running workers seen so far.
    pub fn max_skew(&self) -> u64 {
        self.max_skew
    }

    pub fn predictors(&self) -> &[SpeedPredictor] {
        &self.predictors
    }

    pub fn step(&mut self) -> Result<IterationRecord> {
        if self.sc.scheme.kind.is_synchronous() {
            return self.run_iteration();
        }
        loop {
            if let Some(r) = self.ready.pop_front() {
                return Ok(r);
            }
            self.async_event()?;
        }
    }

    fn current_loss(&self) -> Result<f64> {
        loss_at(self.params(), &self.sc.dataset)
    }

    fn actual_speed(&self, w: usize, s: &ResourceSample) -> f64 {
        match self.sc.workers[w].compute {
            ComputeModel::Cpu { base_speed } => {
                (effective_speed(base_speed, s.cpu, s.mem, &self.sc.memory) * s.speed_factor).max(self.sc.speed_floor)
            }
            ComputeModel::Gpu(_) => f64::NAN,
        }
    }

    /// Compute time, actual speed and predicted speed for `x` samples.
    fn timing(&self, w: usize, x: u64, actual: f64, predicted: f64) -> Result<(f64, f64, f64)> {
        match self.sc.workers[w].compute {
            ComputeModel::Cpu { .. } => Ok((x as f64 / actual, actual, predicted)),
            ComputeModel::Gpu(profile) => {
                let tp = gpu_compute_time(&profile, x)?;
                Ok((tp, x as f64 / tp, x as f64 / tp))
            }
        }
    }

    fn observe(&mut self, w: usize, v: f64, s: &ResourceSample, tm: f64) {
        if !self.sc.is_gpu() {
            self.predictors[w].observe(v, s.cpu, s.mem);
        }
        self.comm_ema[w].observe(tm);
    }

    fn train_rotation(&mut self) {
        if self.sc.predictor.kind != PredictorKind::Narx {
            return;
        }
        let n = self.predictors.len();
        for _ in 0..n.div_ceil(2) {
            self.predictors[self.train_cursor].train();
            self.train_cursor = (self.train_cursor + 1) % n;
        }
    }

    fn gpu_sizes(&self) -> Result<Vec<u64>> {
        let profiles: Vec<GpuProfile> = self
            .sc
            .workers
            .iter()
            .map(|w| match w.compute {
                ComputeModel::Gpu(p) => p,
                ComputeModel::Cpu { .. } => unreachable!("validated as an all-GPU cluster"),
            })
            .collect();
        let comm: Vec<f64> = self
            .sc
            .workers
            .iter()
            .zip(&self.comm_ema)
            .map(|(w, e)| e.value().unwrap_or(w.comm.base_s))
            .collect();
        Ok(gpu_allocate(&profiles, &comm, self.sc.scheme.total_budget)?.sizes)
    }

    /// One BSP / LB-BSP iteration.
    pub fn run_iteration(&mut self) -> Result<IterationRecord> {
        if !self.sc.scheme.kind.is_synchronous() {
            return Err(Error::InvalidArgument(format!(
                "run_iteration needs a synchronous scheme, got {}",
                self.sc.scheme.kind
            )));
        }
        let k = self.updates;
        let n = self.sc.workers.len();
        let budget = self.sc.scheme.total_budget;
        let mut resources = Vec::with_capacity(n);
        let mut actual = Vec::with_capacity(n);
        let mut predicted = Vec::with_capacity(n);
        for (w, worker) in self.sc.workers.iter().enumerate() {
            let s = worker.resources.sample(worker.seed, k, self.time)?;
            let v = self.actual_speed(w, &s);
            predicted.push(self.predictors[w].predict(s.cpu, s.mem, v));
            actual.push(v);
            resources.push(s);
        }

        let sizes = match (self.sc.scheme.kind, self.sc.is_gpu()) {
            (SchemeKind::LbBsp, false) => cpu_allocate(&clamp_speeds(&predicted, self.sc.speed_floor), budget)?.sizes,
            (SchemeKind::LbBsp, true) => {
                let current = match self.queued_sizes.take() {
                    Some(s) => s,
                    None => self.gpu_sizes()?,
                };
                self.queued_sizes = Some(self.gpu_sizes()?);
                current
            }
            _ => equal_split(budget, n),
        };

        let mut rows = Vec::with_capacity(n);
        let mut updates = Vec::with_capacity(n);
        let mut offset = 0;
        for w in 0..n {
            let x = sizes[w];
            let (tp, v, vp) = self.timing(w, x, actual[w], predicted[w])?;
            let tm = self.sc.workers[w].comm.time_at(k);
            rows.push(WorkerRecord {
                worker_id: w,
                x,
                tp_s: tp,
                tm_s: tm,
                wait_s: 0.0,
                v_pred: vp,
                v_actual: v,
            });
            let idx = stream_chunk(self.sc.seed, k, offset, x, self.sc.dataset.len());
            offset += x;
            updates.push(PendingUpdate {
                worker_id: w,
                gradient: batch_gradient_at(&self.model.params, &self.sc.dataset, &idx)?,
                worker_clock: k,
            });
        }
        let wall = rows.iter().map(|r| r.tp_s + r.tm_s).fold(0.0, f64::max);
        for r in &mut rows {
            r.wait_s = wall - (r.tp_s + r.tm_s);
        }

        let next = ps_step(&self.sc.scheme, &self.model, &updates)?;
        let grad_norm = step_norm(&self.model.params, &next.params, self.model.learning_rate);
        self.model = next;
        for w in 0..n {
            let (v, tm) = (rows[w].v_actual, rows[w].tm_s);
            self.observe(w, v, &resources[w], tm);
        }
        self.train_rotation();
        self.time += wall;
        self.updates += 1;
        Ok(IterationRecord {
            k,
            workers: rows,
            grad_norm,
            loss: self.current_loss()?,
            iter_wall_s: wall,
        })
    }

    fn start_async(&mut self, w: usize, iteration: u64, now: f64, wait_before: f64) -> Result<()> {
        let worker = &self.sc.workers[w];
        let n = self.sc.workers.len();
        let s = worker.resources.sample(worker.seed, iteration, now)?;
        let v = self.actual_speed(w, &s);
        let vp = self.predictors[w].predict(s.cpu, s.mem, v);
        let sizes = equal_split(self.sc.scheme.total_budget, n);
        let x = sizes[w];
        let (tp, v, vp) = self.timing(w, x, v, vp)?;
        let tm = worker.comm.time_at(iteration);
        let offset: u64 = sizes[..w].iter().sum();
        let idx = stream_chunk(self.sc.seed, iteration, offset, x, self.sc.dataset.len());
        let params = match &self.ssp {
            Some(server) => server.read_view(),
            None => self.model.params.clone(),
        };
        let gradient = batch_gradient_at(&params, &self.sc.dataset, &idx)?;
        let state = self.asynchronous.as_mut().expect("asynchronous scheme");
        state.started[w] = iteration;
        state.blocked_since[w] = None;
        state.running[w] = Some(InFlight {
            iteration,
            finish: now + tp + tm,
            wait_before,
            record: WorkerRecord {
                worker_id: w,
                x,
                tp_s: tp,
                tm_s: tm,
                wait_s: 0.0,
                v_pred: vp,
                v_actual: v,
            },
            gradient,
            resources: s,
        });
        Ok(())
    }

    /// Called once all workers released at one instant have started.
    fn note_skew(&mut self) {
        if let Some(state) = &self.asynchronous {
            let lo = state.started.iter().min().copied().unwrap_or(0);
            let hi = state.started.iter().max().copied().unwrap_or(0);
            self.max_skew = self.max_skew.max(hi - lo);
        }
    }

    /// Handles the next worker completion (earliest finish, then lowest id).
    fn async_event(&mut self) -> Result<()> {
        let state = self.asynchronous.as_mut().expect("asynchronous scheme");
        let w = (0..state.running.len())
            .filter(|&w| state.running[w].is_some())
            .min_by(|&a, &b| {
                let fa = state.running[a].as_ref().map_or(f64::INFINITY, |f| f.finish);
                let fb = state.running[b].as_ref().map_or(f64::INFINITY, |f| f.finish);
                fa.total_cmp(&fb).then(a.cmp(&b))
            })
            .ok_or_else(|| Error::InvalidArgument("no worker is running".into()))?;
        let done = state.running[w].take().expect("selected a running worker");
        let now = done.finish;
        self.time = now;
        self.observe(w, done.record.v_actual, &done.resources, done.record.tm_s);
        if self.sc.predictor.kind == PredictorKind::Narx && (done.iteration + w as u64).is_multiple_of(2) {
            self.predictors[w].train();
        }
        let update = PendingUpdate {
            worker_id: w,
            gradient: done.gradient,
            worker_clock: done.iteration,
        };

        if self.sc.scheme.kind == SchemeKind::Asp {
            let next = ps_step(&self.sc.scheme, &self.model, std::slice::from_ref(&update))?;
            let grad_norm = step_norm(&self.model.params, &next.params, self.model.learning_rate);
            self.model = next;
            let state = self.asynchronous.as_mut().expect("asynchronous scheme");
            let wall = now - state.last_event;
            state.last_event = now;
            let record = IterationRecord {
                k: self.updates,
                workers: vec![done.record],
                grad_norm,
                loss: self.current_loss()?,
                iter_wall_s: wall,
            };
            self.updates += 1;
            self.ready.push_back(record);
            self.start_async(w, done.iteration + 1, now, 0.0)?;
            self.note_skew();
            return Ok(());
        }

        let server = self.ssp.as_mut().expect("ssp server");
        let before = server.committed().params.clone();
        let committed = server.push(update)?;
        let state = self.asynchronous.as_mut().expect("asynchronous scheme");
        let mut row = done.record;
        row.wait_s = done.wait_before;
        state.rows.entry(done.iteration).or_default().push(row);
        state.blocked_since[w] = Some(now);

        if !committed.is_empty() {
            let eta = self.sc.learning_rate;
            let after = self.ssp.as_ref().expect("ssp server").committed().params.clone();
            let loss = self.current_loss()?;
            let state = self.asynchronous.as_mut().expect("asynchronous scheme");
            for clock in committed {
                let mut rows = state.rows.remove(&clock).unwrap_or_default();
                rows.sort_by_key(|r| r.worker_id);
                let wall = now - state.last_event;
                state.last_event = now;
                self.ready.push_back(IterationRecord {
                    k: clock,
                    workers: rows,
                    grad_norm: step_norm(&before, &after, eta),
                    loss,
                    iter_wall_s: wall,
                });
                self.updates += 1;
            }
        }

        let server = self.ssp.as_ref().expect("ssp server");
        let state = self.asynchronous.as_ref().expect("asynchronous scheme");
        let ready: Vec<(usize, f64)> = (0..state.blocked_since.len())
            .filter_map(|v| state.blocked_since[v].map(|t| (v, t)))
            .filter(|&(v, _)| server.gate(v) == Gate::Proceed)
            .collect();
        for (v, since) in ready {
            let next = self.ssp.as_ref().expect("ssp server").completed(v);
            self.start_async(v, next, now, now - since)?;
        }
        self.note_skew();
        Ok(())
    }
}

fn step_norm(before: &[f64], after: &[f64], eta: f64) -> f64 {
    before
        .iter()
        .zip(after)
        .map(|(a, b)| ((a - b) / eta).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    /// Keep the parameter vector after every applied update.
    pub record_trajectory: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub trajectory: Vec<Vec<f64>>,
    pub max_skew: u64,
    /// Simulated seconds until the last applied update.
    pub sim_time_s: f64,
}

/// Runs until the convergence rule fires or `max_iterations` updates are applied.
pub fn run_training(scenario: &Scenario, options: RunOptions) -> Result<RunOutput> {
    let mut sim = Simulation::new(scenario.clone())?;
    let mut records = Vec::new();
    let mut trajectory = Vec::new();
    let mut streak = 0u64;
    let mut converged = false;
    while sim.updates() < scenario.max_iterations {
        let record = sim.step()?;
        if options.record_trajectory {
            trajectory.push(sim.params().to_vec());
        }
        streak = if record.loss < scenario.convergence.loss_threshold {
            streak + 1
        } else {
            0
        };
        records.push(record);
        if streak >= scenario.convergence.consecutive {
            converged = true;
            break;
        }
    }
    if !converged {
        log::info!("no convergence within {} updates", scenario.max_iterations);
    }
    Ok(RunOutput {
        records,
        converged,
        trajectory,
        max_skew: sim.max_skew(),
        sim_time_s: sim.time(),
    })
}
