//! Next-iteration speed prediction.
//!
//! Three predictors are provided: the last observation ("memoryless"), an
//! exponential moving average, and a small NARX network that regresses the next
//! speed on the two previous speeds plus the current and two previous CPU and
//! memory availability fractions. The NARX model is trained online; until it has
//! seen enough iterations the pipeline answers with the EMA.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sizer::DEFAULT_SPEED_FLOOR;

pub const SPEED_LAGS: usize = 2;
pub const RESOURCE_LAGS: usize = 2;
/// Two past speeds, then current + two past CPU, then current + two past memory.
pub const NARX_INPUTS: usize = SPEED_LAGS + 2 * (RESOURCE_LAGS + 1);
pub const MAX_NARX_PARAMS: usize = 20;

pub const DEFAULT_EMA_ALPHA: f64 = 0.2;
pub const DEFAULT_WARMUP: usize = 500;

/// Aligned per-iteration series for one worker.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpeedHistory {
    /// Observed samples per second.
    pub v: Vec<f64>,
    /// CPU availability fraction.
    pub c: Vec<f64>,
    /// Memory availability fraction.
    pub m: Vec<f64>,
}

impl SpeedHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_series(v: Vec<f64>, c: Vec<f64>, m: Vec<f64>) -> Result<Self> {
        if v.len() != c.len() || v.len() != m.len() {
            return Err(Error::InvalidArgument(format!(
                "series lengths differ: v={}, c={}, m={}",
                v.len(),
                c.len(),
                m.len()
            )));
        }
        Ok(SpeedHistory { v, c, m })
    }

    pub fn push(&mut self, v: f64, c: f64, m: f64) {
        self.v.push(v);
        self.c.push(c);
        self.m.push(m);
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

pub fn predict_memoryless(history: &SpeedHistory) -> Result<f64> {
    history.v.last().copied().ok_or(Error::Empty("speed history"))
}

/// `ema_0 = s_0`, `ema_k = alpha * s_k + (1 - alpha) * ema_{k-1}`.
pub fn ema_of(series: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let (first, rest) = series.split_first().ok_or(Error::Empty("series"))?;
    Ok(rest.iter().fold(*first, |ema, &s| alpha * s + (1.0 - alpha) * ema))
}

pub fn predict_ema(history: &SpeedHistory, alpha: f64) -> Result<f64> {
    ema_of(&history.v, alpha)
}

/// EMA over observed communication times.
pub fn predict_comm_ema(comm_times: &[f64], alpha: f64) -> Result<f64> {
    ema_of(comm_times, alpha)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "EMA alpha must be in (0, 1], got {alpha}"
        )))
    }
}

/// Incremental EMA; produces bit-identical values to [`ema_of`] over the same series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ema {
    alpha: f64,
    value: Option<f64>,
}

impl Ema {
    pub fn new(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Ema { alpha, value: None })
    }

    pub fn observe(&mut self, s: f64) {
        self.value = Some(match self.value {
            None => s,
            Some(prev) => self.alpha * s + (1.0 - self.alpha) * prev,
        });
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

/// Inputs of one NARX forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NarxWindow {
    /// `v^{k-1}, v^{k-2}`
    pub speeds: [f64; SPEED_LAGS],
    /// `c^k, c^{k-1}, c^{k-2}`
    pub cpu: [f64; RESOURCE_LAGS + 1],
    /// `m^k, m^{k-1}, m^{k-2}`
    pub mem: [f64; RESOURCE_LAGS + 1],
}

impl NarxWindow {
    /// Window predicting iteration `k = history.len()` given that iteration's resources.
    pub fn for_next(history: &SpeedHistory, cpu_now: f64, mem_now: f64) -> Option<Self> {
        let k = history.len();
        if k < SPEED_LAGS.max(RESOURCE_LAGS) {
            return None;
        }
        Some(NarxWindow {
            speeds: [history.v[k - 1], history.v[k - 2]],
            cpu: [cpu_now, history.c[k - 1], history.c[k - 2]],
            mem: [mem_now, history.m[k - 1], history.m[k - 2]],
        })
    }

    /// Window whose target is `history.v[t]`.
    fn at(history: &SpeedHistory, t: usize) -> Self {
        NarxWindow {
            speeds: [history.v[t - 1], history.v[t - 2]],
            cpu: [history.c[t], history.c[t - 1], history.c[t - 2]],
            mem: [history.m[t], history.m[t - 1], history.m[t - 2]],
        }
    }
}

/// Affine maps applied to the network's inputs and output.
///
/// Speeds are expressed relative to a reference level (`v / v_ref - 1`);
/// availability fractions are mapped from `[0, 1]` onto `[-1, 1]`. Both keep
/// unseen resource levels inside the range where one tanh unit extrapolates
/// smoothly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub speed_ref: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { speed_ref: 0.0 };

    fn speed_in(&self, v: f64) -> f64 {
        if self.speed_ref > 0.0 {
            v / self.speed_ref - 1.0
        } else {
            v
        }
    }

    fn speed_out(&self, z: f64) -> f64 {
        if self.speed_ref > 0.0 {
            (z + 1.0) * self.speed_ref
        } else {
            z
        }
    }

    fn fraction(x: f64) -> f64 {
        2.0 * x - 1.0
    }

    fn features(&self, w: &NarxWindow) -> [f64; NARX_INPUTS] {
        let mut z = [0.0; NARX_INPUTS];
        for (i, v) in w.speeds.iter().enumerate() {
            z[i] = self.speed_in(*v);
        }
        for (i, c) in w.cpu.iter().enumerate() {
            z[SPEED_LAGS + i] = Self::fraction(*c);
        }
        for (i, m) in w.mem.iter().enumerate() {
            z[SPEED_LAGS + RESOURCE_LAGS + 1 + i] = Self::fraction(*m);
        }
        z
    }
}

/// One-hidden-layer feedforward network: tanh hidden units, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct NarxModel {
    hidden: usize,
    /// Row-major `hidden x NARX_INPUTS`.
    w_in: Vec<f64>,
    b_hidden: Vec<f64>,
    w_out: Vec<f64>,
    b_out: f64,
    pub norm: Normalization,
    /// Training loss after every accepted epoch, across all training calls.
    pub loss_history: Vec<f64>,
    pub floor: f64,
}

pub fn narx_param_count(hidden: usize) -> usize {
    hidden * (NARX_INPUTS + 1) + hidden + 1
}

impl NarxModel {
    /// Seeded small random weights. Fails when the network would have
    /// [`MAX_NARX_PARAMS`] or more parameters.
    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in model.w_in.iter_mut().chain(model.w_out.iter_mut()) {
            *w = rng.random_range(-0.5..0.5);
        }
        Ok(model)
    }

    pub fn zeros(hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidArgument("NARX needs at least one hidden unit".into()));
        }
        let count = narx_param_count(hidden);
        if count >= MAX_NARX_PARAMS {
            return Err(Error::InvalidArgument(format!(
                "NARX with {hidden} hidden units has {count} parameters (limit < {MAX_NARX_PARAMS})"
            )));
        }
        Ok(NarxModel {
            hidden,
            w_in: vec![0.0; hidden * NARX_INPUTS],
            b_hidden: vec![0.0; hidden],
            w_out: vec![0.0; hidden],
            b_out: 0.0,
            norm: Normalization::IDENTITY,
            loss_history: Vec::new(),
            floor: DEFAULT_SPEED_FLOOR,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_count(&self) -> usize {
        narx_param_count(self.hidden)
    }

    pub fn set_output_bias(&mut self, b: f64) {
        self.b_out = b;
    }

    /// Weight of input `input` into hidden unit `unit`.
    pub fn set_input_weight(&mut self, unit: usize, input: usize, w: f64) {
        self.w_in[unit * NARX_INPUTS + input] = w;
    }

    pub fn set_output_weight(&mut self, unit: usize, w: f64) {
        self.w_out[unit] = w;
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend_from_slice(&self.w_in);
        p.extend_from_slice(&self.b_hidden);
        p.extend_from_slice(&self.w_out);
        p.push(self.b_out);
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let h = self.hidden;
        let (w_in, rest) = p.split_at(h * NARX_INPUTS);
        let (b_hidden, rest) = rest.split_at(h);
        let (w_out, rest) = rest.split_at(h);
        self.w_in.copy_from_slice(w_in);
        self.b_hidden.copy_from_slice(b_hidden);
        self.w_out.copy_from_slice(w_out);
        self.b_out = rest[0];
    }

    fn forward_normalized(&self, z: &[f64; NARX_INPUTS], hidden_out: &mut [f64]) -> f64 {
        let mut out = self.b_out;
        let rows = self.w_in.chunks_exact(NARX_INPUTS).zip(&self.b_hidden).zip(&self.w_out);
        for (slot, ((row, bias), w_out)) in hidden_out[..self.hidden].iter_mut().zip(rows) {
            let h = (bias + row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>()).tanh();
            *slot = h;
            out += w_out * h;
        }
        out
    }

    /// Single forward pass; the result is clamped to at least `floor`.
    pub fn predict(&self, window: &NarxWindow) -> f64 {
        let z = self.norm.features(window);
        let mut hidden = vec![0.0; self.hidden];
        let y = self.norm.speed_out(self.forward_normalized(&z, &mut hidden));
        if y.is_finite() {
            y.max(self.floor)
        } else {
            self.floor
        }
    }

    /// Flat `name,value` CSV of every parameter plus the normalisation reference.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,value\n");
        for j in 0..self.hidden {
            for i in 0..NARX_INPUTS {
                let _ = writeln!(out, "hidden{j}.w{i},{}", self.w_in[j * NARX_INPUTS + i]);
            }
            let _ = writeln!(out, "hidden{j}.bias,{}", self.b_hidden[j]);
        }
        for j in 0..self.hidden {
            let _ = writeln!(out, "out.w{j},{}", self.w_out[j]);
        }
        let _ = writeln!(out, "out.bias,{}", self.b_out);
        let _ = writeln!(out, "norm.speed_ref,{}", self.norm.speed_ref);
        out
    }

    /// Parses the format written by [`NarxModel::to_csv`]. The hidden width is
    /// inferred from the names; `norm.speed_ref` is optional.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rows: Vec<(String, f64)> = Vec::new();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "name,value" => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "expected header `name,value`".into(),
                })
            }
        }
        for (idx, line) in lines {
            let line_no = idx as u64 + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (name, value) = line.split_once(',').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "expected `name,value`".into(),
            })?;
            let value: f64 = value.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("`{}` is not a number", value.trim()),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("weight `{name}` is not finite"),
                });
            }
            rows.push((name.trim().to_string(), value));
        }
        let hidden = rows.iter().filter(|(n, _)| n.starts_with("out.w")).count();
        let mut model = NarxModel::zeros(hidden)?;
        let mut seen = vec![false; model.param_count()];
        for (name, value) in rows {
            let slot = model
                .slot_of(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown weight `{name}`")))?;
            match slot {
                Slot::Param(i) => {
                    if std::mem::replace(&mut seen[i], true) {
                        return Err(Error::InvalidArgument(format!("duplicate weight `{name}`")));
                    }
                    let mut p = model.params();
                    p[i] = value;
                    model.set_params(&p);
                }
                Slot::SpeedRef => {
                    if value < 0.0 {
                        return Err(Error::InvalidArgument("norm.speed_ref must be >= 0".into()));
                    }
                    model.norm.speed_ref = value;
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("missing weight #{i}")));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_csv_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }

    fn slot_of(&self, name: &str) -> Option<Slot> {
        let h = self.hidden;
        if name == "norm.speed_ref" {
            return Some(Slot::SpeedRef);
        }
        if name == "out.bias" {
            return Some(Slot::Param(h * NARX_INPUTS + 2 * h));
        }
        if let Some(j) = name.strip_prefix("out.w") {
            let j: usize = j.parse().ok()?;
            return (j < h).then_some(Slot::Param(h * NARX_INPUTS + h + j));
        }
        let rest = name.strip_prefix("hidden")?;
        let (j, field) = rest.split_once('.')?;
        let j: usize = j.parse().ok()?;
        if j >= h {
            return None;
        }
        if field == "bias" {
            return Some(Slot::Param(h * NARX_INPUTS + j));
        }
        let i: usize = field.strip_prefix('w')?.parse().ok()?;
        (i < NARX_INPUTS).then_some(Slot::Param(j * NARX_INPUTS + i))
    }
}

enum Slot {
    Param(usize),
    SpeedRef,
}

/// Stop once the loss has improved by less than `tolerance` on `patience`
/// consecutive steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub tolerance: f64,
    pub patience: usize,
    previous: Option<f64>,
    stalled: usize,
}

impl EarlyStopping {
    pub fn new(tolerance: f64, patience: usize) -> Self {
        EarlyStopping {
            tolerance,
            patience,
            previous: None,
            stalled: 0,
        }
    }

    /// Records a loss value; returns true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if let Some(prev) = self.previous {
            if prev - loss < self.tolerance {
                self.stalled += 1;
            } else {
                self.stalled = 0;
            }
        }
        self.previous = Some(loss);
        self.stalled >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NarxTraining {
    /// Iterations of history required before the network is trained or used.
    pub warmup: usize,
    pub step: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub patience: usize,
    /// Only the most recent `window` iterations are used as training data.
    pub window: usize,
}

impl Default for NarxTraining {
    fn default() -> Self {
        NarxTraining {
            warmup: DEFAULT_WARMUP,
            step: 0.05,
            max_epochs: 500,
            tolerance: 1e-4,
            patience: 4,
            window: 500,
        }
    }
}

struct TrainingSet {
    inputs: Vec<[f64; NARX_INPUTS]>,
    targets: Vec<f64>,
}

fn training_set(history: &SpeedHistory, norm: &Normalization, window: usize) -> TrainingSet {
    let start = history.len().saturating_sub(window).max(SPEED_LAGS.max(RESOURCE_LAGS));
    let mut inputs = Vec::with_capacity(history.len() - start);
    let mut targets = Vec::with_capacity(history.len() - start);
    for t in start..history.len() {
        inputs.push(norm.features(&NarxWindow::at(history, t)));
        targets.push(norm.speed_in(history.v[t]));
    }
    TrainingSet { inputs, targets }
}

fn mse_and_grad(model: &NarxModel, set: &TrainingSet, grad: &mut [f64]) -> f64 {
    let h = model.hidden;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut hidden = vec![0.0; h];
    let mut loss = 0.0;
    let n = set.targets.len() as f64;
    let off_bh = h * NARX_INPUTS;
    let off_wo = off_bh + h;
    let off_bo = off_wo + h;
    for (z, &y) in set.inputs.iter().zip(&set.targets) {
        let out = model.forward_normalized(z, &mut hidden);
        let err = out - y;
        loss += err * err;
        let d_out = 2.0 * err / n;
        grad[off_bo] += d_out;
        for j in 0..h {
            grad[off_wo + j] += d_out * hidden[j];
            let d_a = d_out * model.w_out[j] * (1.0 - hidden[j] * hidden[j]);
            grad[off_bh + j] += d_a;
            for (g, x) in grad[j * NARX_INPUTS..(j + 1) * NARX_INPUTS].iter_mut().zip(z) {
                *g += d_a * x;
            }
        }
    }
    loss / n
}

fn mse(model: &NarxModel, set: &TrainingSet) -> f64 {
    let mut hidden = vec![0.0; model.hidden];
    let total: f64 = set
        .inputs
        .iter()
        .zip(&set.targets)
        .map(|(z, y)| {
            let e = model.forward_normalized(z, &mut hidden) - y;
            e * e
        })
        .sum();
    total / set.targets.len() as f64
}

/// Full-batch gradient descent with Adam step scaling on the mean squared
/// prediction error over the most recent `cfg.window` iterations of `history`.
///
/// Steps that would raise the loss are rejected and the step size halved, so
/// the recorded loss sequence never increases. Returns the model unchanged
/// when the history is shorter than the warm-up.
pub fn narx_train_online(model: &NarxModel, history: &SpeedHistory, cfg: &NarxTraining) -> NarxModel {
    let mut model = model.clone();
    let min_len = cfg.warmup.max(SPEED_LAGS.max(RESOURCE_LAGS) + 1);
    if history.len() < min_len {
        return model;
    }
    let recent = &history.v[history.len().saturating_sub(cfg.window)..];
    let reference = recent.iter().sum::<f64>() / recent.len() as f64;
    if reference > 0.0 && model.norm.speed_ref != reference {
        rescale_output(&mut model, reference);
    }
    let set = training_set(history, &model.norm, cfg.window);
    if set.targets.is_empty() {
        return model;
    }

    let mut params = model.params();
    let mut grad = vec![0.0; params.len()];
    let mut first = vec![0.0; params.len()];
    let mut second = vec![0.0; params.len()];
    let (beta1, beta2, eps) = (0.9_f64, 0.999_f64, 1e-8);
    let mut step = cfg.step;
    let mut loss = mse_and_grad(&model, &set, &mut grad);
    let mut stopper = EarlyStopping::new(cfg.tolerance, cfg.patience);
    stopper.observe(loss);
    for epoch in 1..=cfg.max_epochs {
        for ((m1, m2), g) in first.iter_mut().zip(second.iter_mut()).zip(&grad) {
            *m1 = beta1 * *m1 + (1.0 - beta1) * g;
            *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
        }
        let c1 = 1.0 - beta1.powi(epoch as i32);
        let c2 = 1.0 - beta2.powi(epoch as i32);
        let candidate: Vec<f64> = params
            .iter()
            .zip(first.iter().zip(&second))
            .map(|(p, (m1, m2))| p - step * (m1 / c1) / ((m2 / c2).sqrt() + eps))
            .collect();
        model.set_params(&candidate);
        let cand_loss = mse(&model, &set);
        let accepted = if cand_loss.is_finite() && cand_loss <= loss {
            params = candidate;
            loss = mse_and_grad(&model, &set, &mut grad);
            model.loss_history.push(loss);
            true
        } else {
            model.set_params(&params);
            step *= 0.5;
            false
        };
        if stopper.observe(loss) || (!accepted && step < 1e-12) {
            break;
        }
    }
    model.set_params(&params);
    model
}

/// Re-expresses the output layer for a new speed reference so the network's
/// predictions in absolute units are preserved as far as the affine map allows.
fn rescale_output(model: &mut NarxModel, reference: f64) {
    let old = model.norm;
    if old.speed_ref > 0.0 {
        // out_abs = (z + 1) * old_ref; new z' = out_abs / ref - 1
        let ratio = old.speed_ref / reference;
        for w in &mut model.w_out {
            *w *= ratio;
        }
        model.b_out = (model.b_out + 1.0) * ratio - 1.0;
        // Speed inputs scale the other way.
        let inv = reference / old.speed_ref;
        for j in 0..model.hidden {
            let mut shift = 0.0;
            for i in 0..SPEED_LAGS {
                let w = &mut model.w_in[j * NARX_INPUTS + i];
                // z_old = v/old - 1 = inv*(z_new + 1) - 1
                shift += *w * (inv - 1.0);
                *w *= inv;
            }
            model.b_hidden[j] += shift;
        }
    }
    model.norm = Normalization { speed_ref: reference };
}

/// Which predictor a worker's batch sizing relies on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Memoryless,
    Ema,
    Narx,
    /// Reads the actual speed; used to isolate coordination effects from
    /// prediction error.
    Oracle,
}

impl std::str::FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "memoryless" => Ok(PredictorKind::Memoryless),
            "ema" => Ok(PredictorKind::Ema),
            "narx" => Ok(PredictorKind::Narx),
            "oracle" => Ok(PredictorKind::Oracle),
            other => Err(Error::InvalidArgument(format!("unknown predictor `{other}`"))),
        }
    }
}

/// Per-worker prediction state: history, incremental EMA and (optionally) a NARX model.
#[derive(Debug, Clone)]
pub struct SpeedPredictor {
    kind: PredictorKind,
    history: SpeedHistory,
    ema: Ema,
    narx: Option<NarxModel>,
    training: NarxTraining,
    trained: bool,
    prior: f64,
}

impl SpeedPredictor {
    /// `prior` is returned before any observation exists.
    pub fn new(kind: PredictorKind, alpha: f64, training: NarxTraining, prior: f64, seed: u64) -> Result<Self> {
        let narx = match kind {
            PredictorKind::Narx => Some(NarxModel::new(1, seed)?),
            _ => None,
        };
        Ok(SpeedPredictor {
            kind,
            history: SpeedHistory::new(),
            ema: Ema::new(alpha)?,
            narx,
            training,
            trained: false,
            prior,
        })
    }

    /// Starts from pre-trained weights instead of a random initialisation.
    pub fn with_initial_model(mut self, model: NarxModel) -> Self {
        if self.kind == PredictorKind::Narx {
            self.narx = Some(model);
        }
        self
    }

    pub fn kind(&self) -> PredictorKind {
        self.kind
    }

    pub fn history(&self) -> &SpeedHistory {
        &self.history
    }

    pub fn narx(&self) -> Option<&NarxModel> {
        self.narx.as_ref()
    }

    pub fn is_warm(&self) -> bool {
        self.history.len() >= self.training.warmup
    }

    /// Whether the NARX model is currently the one answering.
    pub fn narx_active(&self) -> bool {
        self.kind == PredictorKind::Narx && self.trained && self.is_warm()
    }

    /// Prediction for the next iteration given its CPU/memory availability.
    /// `actual` is only consulted by [`PredictorKind::Oracle`].
    pub fn predict(&self, cpu_now: f64, mem_now: f64, actual: f64) -> f64 {
        match self.kind {
            PredictorKind::Oracle => actual,
            PredictorKind::Memoryless => self.history.v.last().copied().unwrap_or(self.prior),
            PredictorKind::Ema => self.ema.value().unwrap_or(self.prior),
            PredictorKind::Narx => {
                if self.narx_active() {
                    if let (Some(model), Some(window)) =
                        (&self.narx, NarxWindow::for_next(&self.history, cpu_now, mem_now))
                    {
                        return model.predict(&window);
                    }
                }
                self.ema.value().unwrap_or(self.prior)
            }
        }
    }

    pub fn observe(&mut self, v: f64, c: f64, m: f64) {
        self.history.push(v, c, m);
        self.ema.observe(v);
    }

    /// One online training round; no-op before warm-up or for non-NARX predictors.
    pub fn train(&mut self) {
        if let Some(model) = &self.narx {
            if self.is_warm() {
                self.narx = Some(narx_train_online(model, &self.history, &self.training));
                self.trained = true;
            }
        }
    }
}
