//! Synthetic logistic-regression workload.
//!
//! Every coordination scheme in this crate trains the same convex model so that
//! statistical-efficiency comparisons between schemes are exact rather than
//! statistical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Default half-width of the uniform label noise added to the separator margin.
pub const DEFAULT_LABEL_NOISE: f64 = 0.5;

/// Binary classification samples drawn around a hidden linear separator.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
    seed: u64,
    separator: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset from explicit rows. Labels must be 0 or 1.
    pub fn from_samples(samples: Vec<(Vec<f64>, f64)>, seed: u64) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("dataset"))?;
        let dim = first.0.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be >= 1".into()));
        }
        let mut features = Vec::with_capacity(samples.len() * dim);
        let mut labels = Vec::with_capacity(samples.len());
        for (x, y) in samples {
            if x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: x.len(),
                });
            }
            features.extend_from_slice(&x);
            labels.push(y);
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            seed,
            separator: vec![0.0; dim],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Ground-truth separator used to label the samples (zero for hand-built datasets).
    pub fn separator(&self) -> &[f64] {
        &self.separator
    }

    pub fn sample(&self, index: usize) -> (&[f64], f64) {
        let row = &self.features[index * self.dim..(index + 1) * self.dim];
        (row, self.labels[index])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.features.chunks_exact(self.dim).zip(self.labels.iter().copied())
    }
}

/// Parameters plus learning rate and the number of updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: Vec<f64>,
    pub learning_rate: f64,
    pub clock: u64,
}

impl ModelState {
    pub fn new(params: Vec<f64>, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("parameters must be finite".into()));
        }
        Ok(ModelState {
            params,
            learning_rate,
            clock: 0,
        })
    }

    pub fn zeros(dim: usize, learning_rate: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], learning_rate)
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    /// One SGD step: `params -= learning_rate * g`, clock + 1.
    pub fn apply_update(&self, g: &Gradient) -> Result<ModelState> {
        let mut next = self.clone();
        next.apply_update_in_place(g)?;
        Ok(next)
    }

    pub fn apply_update_in_place(&mut self, g: &Gradient) -> Result<()> {
        if g.values.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: g.values.len(),
            });
        }
        let eta = self.learning_rate;
        for (p, gv) in self.params.iter_mut().zip(&g.values) {
            *p -= eta * gv;
        }
        self.clock += 1;
        Ok(())
    }
}

/// Mean gradient over a batch, tagged with the number of samples behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
    pub batch_size: u64,
}

impl Gradient {
    pub fn zeros(dim: usize, batch_size: u64) -> Self {
        Gradient {
            values: vec![0.0; dim],
            batch_size,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Deterministic dataset with the default label noise.
pub fn generate_dataset(seed: u64, n: usize, d: usize) -> Result<Dataset> {
    generate_dataset_with_noise(seed, n, d, DEFAULT_LABEL_NOISE)
}

/// Features are standard normal; the label is 1 when `separator . x + u > 0`
/// with `u ~ U[-noise, noise]`. The separator itself is standard normal.
pub fn generate_dataset_with_noise(seed: u64, n: usize, d: usize, noise: f64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("feature dimension must be >= 1".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("label noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let separator: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let start = features.len();
        features.extend((0..d).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
        let margin = dot(&separator, &features[start..]);
        let jitter = if noise > 0.0 {
            rng.random_range(-noise..=noise)
        } else {
            0.0
        };
        labels.push(if margin + jitter > 0.0 { 1.0 } else { 0.0 });
    }
    Ok(Dataset {
        features,
        labels,
        dim: d,
        seed,
        separator,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic loss of one sample.
pub fn sample_loss(params: &[f64], x: &[f64], y: f64) -> f64 {
    let z = dot(params, x);
    softplus(z) - y * z
}

/// Adds the gradient of one sample's loss into `acc`.
pub fn accumulate_sample_gradient(params: &[f64], x: &[f64], y: f64, acc: &mut [f64]) {
    let residual = sigmoid(dot(params, x)) - y;
    for (a, xi) in acc.iter_mut().zip(x) {
        *a += residual * xi;
    }
}

/// Mean logistic loss over the whole dataset.
pub fn loss(model: &ModelState, dataset: &Dataset) -> Result<f64> {
    loss_at(&model.params, dataset)
}

pub fn loss_at(params: &[f64], dataset: &Dataset) -> Result<f64> {
    if params.len() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dim(),
            got: params.len(),
        });
    }
    let total: f64 = dataset.iter().map(|(x, y)| sample_loss(params, x, y)).sum();
    Ok(total / dataset.len() as f64)
}

/// Mean per-sample gradient over `indices` (duplicates count once per occurrence).
pub fn batch_gradient(model: &ModelState, dataset: &Dataset, indices: &[usize]) -> Result<Gradient> {
    batch_gradient_at(&model.params, dataset, indices)
}

pub fn batch_gradient_at(params: &[f64], dataset: &Dataset, indices: &[usize]) -> Result<Gradient> {
    if indices.is_empty() {
        return Err(Error::Empty("batch index set"));
    }
    if params.len() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dim(),
            got: params.len(),
        });
    }
    let mut acc = vec![0.0; dataset.dim()];
    for &i in indices {
        if i >= dataset.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: dataset.len(),
            });
        }
        let (x, y) = dataset.sample(i);
        accumulate_sample_gradient(params, x, y, &mut acc);
    }
    let count = indices.len() as f64;
    for a in &mut acc {
        *a /= count;
    }
    Ok(Gradient {
        values: acc,
        batch_size: indices.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_batch(dataset: &Dataset) -> Vec<usize> {
        (0..dataset.len()).collect()
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate_dataset(1, 4, 2).unwrap();
        let b = generate_dataset(1, 4, 2).unwrap();
        let c = generate_dataset(2, 4, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.features, c.features);
        assert_eq!(a.len(), 4);
        assert_eq!(a.dim(), 2);
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(generate_dataset(1, 0, 2).is_err());
        assert!(generate_dataset(1, 3, 0).is_err());
    }

    #[test]
    fn single_index_gradient_is_the_sample_gradient() {
        let ds = generate_dataset(3, 20, 4).unwrap();
        let model = ModelState::new(vec![0.3, -0.2, 0.1, 0.5], 0.1).unwrap();
        let g = batch_gradient(&model, &ds, &[7]).unwrap();
        let mut expect = vec![0.0; 4];
        let (x, y) = ds.sample(7);
        accumulate_sample_gradient(&model.params, x, y, &mut expect);
        assert_eq!(g.values, expect);
        assert_eq!(g.batch_size, 1);
    }

    #[test]
    fn two_index_gradient_is_the_pair_mean() {
        let ds = generate_dataset(3, 20, 4).unwrap();
        let model = ModelState::new(vec![0.3, -0.2, 0.1, 0.5], 0.1).unwrap();
        let ga = batch_gradient(&model, &ds, &[2]).unwrap();
        let gb = batch_gradient(&model, &ds, &[11]).unwrap();
        let gab = batch_gradient(&model, &ds, &[2, 11]).unwrap();
        for i in 0..4 {
            let expect = (ga.values[i] + gb.values[i]) / 2.0;
            assert!((gab.values[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
        assert_eq!(gab.batch_size, 2);
    }

    #[test]
    fn out_of_range_and_empty_indices_are_rejected() {
        let ds = generate_dataset(3, 5, 2).unwrap();
        let model = ModelState::zeros(2, 0.1).unwrap();
        assert!(matches!(
            batch_gradient(&model, &ds, &[5]),
            Err(Error::IndexOutOfRange { index: 5, len: 5 })
        ));
        assert!(batch_gradient(&model, &ds, &[]).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let ds = generate_dataset(11, 50, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-6;
        for _ in 0..100 {
            let params: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let j = rng.random_range(0..ds.len());
            let (x, y) = ds.sample(j);
            let model = ModelState::new(params.clone(), 0.1).unwrap();
            let g = batch_gradient(&model, &ds, &[j]).unwrap();
            let mut fd = vec![0.0; 5];
            for (i, slot) in fd.iter_mut().enumerate() {
                let mut up = params.clone();
                let mut down = params.clone();
                up[i] += h;
                down[i] -= h;
                *slot = (sample_loss(&up, x, y) - sample_loss(&down, x, y)) / (2.0 * h);
            }
            let diff: f64 = g
                .values
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
            assert!(diff / scale < 1e-4, "relative error {} too large", diff / scale);
        }
    }

    #[test]
    fn loss_matches_naive_summation() {
        let ds = generate_dataset(5, 300, 6).unwrap();
        let model = ModelState::new(vec![0.1; 6], 0.1).unwrap();
        let mut total = 0.0;
        for i in 0..ds.len() {
            let (x, y) = ds.sample(i);
            let z: f64 = x.iter().zip(&model.params).map(|(a, b)| a * b).sum();
            total += (1.0 + z.exp()).ln() - y * z;
        }
        let naive = total / ds.len() as f64;
        let got = loss(&model, &ds).unwrap();
        assert!((got - naive).abs() <= 1e-12 * naive.abs());
    }

    #[test]
    fn separator_beats_origin_without_noise() {
        let ds = generate_dataset_with_noise(4, 200, 3, 0.0).unwrap();
        let at_origin = loss_at(&[0.0; 3], &ds).unwrap();
        let at_truth = loss_at(ds.separator(), &ds).unwrap();
        assert!(at_truth < at_origin);
        assert!((at_origin - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_dataset_has_identical_loss() {
        let ds = generate_dataset(8, 40, 3).unwrap();
        let rows: Vec<(Vec<f64>, f64)> = ds.iter().map(|(x, y)| (x.to_vec(), y)).collect();
        let doubled: Vec<(Vec<f64>, f64)> = rows.iter().chain(rows.iter()).cloned().collect();
        let ds2 = Dataset::from_samples(doubled, 8).unwrap();
        let params = [0.4, -0.1, 0.7];
        let a = loss_at(&params, &ds).unwrap();
        let b = loss_at(&params, &ds2).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn zero_gradient_only_advances_clock() {
        let model = ModelState::new(vec![1.0, -2.0], 0.3).unwrap();
        let next = model.apply_update(&Gradient::zeros(2, 4)).unwrap();
        assert_eq!(next.params, model.params);
        assert_eq!(next.clock, 1);
    }

    #[test]
    fn update_arithmetic() {
        let model = ModelState::new(vec![1.0, 1.0], 0.1).unwrap();
        let g = Gradient {
            values: vec![10.0, 0.0],
            batch_size: 1,
        };
        let next = model.apply_update(&g).unwrap();
        assert_eq!(next.params, vec![0.0, 1.0]);
        assert!(model.apply_update(&Gradient::zeros(3, 1)).is_err());
    }

    /// Largest step for which full-batch descent never increases the loss over
    /// `steps` iterations, found by halving from 8.
    fn stable_step(ds: &Dataset, steps: usize) -> f64 {
        let all = full_batch(ds);
        let mut eta = 8.0;
        'search: loop {
            let mut model = ModelState::zeros(ds.dim(), eta).unwrap();
            let mut prev = loss(&model, ds).unwrap();
            for _ in 0..steps {
                let g = batch_gradient(&model, ds, &all).unwrap();
                model = model.apply_update(&g).unwrap();
                let cur = loss(&model, ds).unwrap();
                if cur > prev + 1e-15 {
                    eta /= 2.0;
                    continue 'search;
                }
                prev = cur;
            }
            return eta;
        }
    }

    #[test]
    fn full_batch_descent_decreases_loss_monotonically() {
        let ds = generate_dataset(7, 1000, 10).unwrap();
        let eta = stable_step(&ds, 60);
        let all = full_batch(&ds);
        let mut model = ModelState::zeros(10, eta).unwrap();
        let mut losses = vec![loss(&model, &ds).unwrap()];
        for _ in 0..60 {
            let g = batch_gradient(&model, &ds, &all).unwrap();
            model = model.apply_update(&g).unwrap();
            losses.push(loss(&model, &ds).unwrap());
        }
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
        assert!(losses.last().unwrap() < &(0.5 * losses[0]));
        assert_eq!(model.clock, 60);
    }
}
