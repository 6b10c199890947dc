//! Minimal multilayer perceptron with manual backpropagation.
//!
//! Parameters live in one flat vector, layer-major: for each layer the
//! `in x out` weight block in row-major order, then the `out` biases.
//! Hidden layers use tanh; the output layer feeds softmax cross-entropy.
//! Weights initialize as Gaussians scaled by `1/sqrt(fan_in)`, biases zero.

use crate::prng::{derive, stream};
use crate::ParamVec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Default separation between synthetic class centers, in units of the
/// within-class standard deviation. Classes this far apart are cleanly
/// learnable; push the separation down to make the task irreducibly noisy.
pub const DEFAULT_CLASS_SEPARATION: f64 = 3.0;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("architecture needs at least two layers with positive sizes")]
    InvalidArchitecture,
    #[error("parameter vector has {got} entries, architecture expects {expected}")]
    ParamLengthMismatch { expected: usize, got: usize },
    #[error("feature dimension {got} does not match input layer {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset must be nonempty")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{samples} samples cannot be split into {shards} equal shards")]
    IndivisiblePartition { samples: usize, shards: usize },
    #[error("learning rate must be nonnegative and finite")]
    InvalidLearningRate,
}

/// Layer sizes from input dimension through hidden widths to class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpArchitecture {
    layer_sizes: Vec<usize>,
}

impl MlpArchitecture {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(NnError::InvalidArchitecture);
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total parameter count: sum of `in*out + out` over layers.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Labeled feature matrix; also used for shards and mini-batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self, NnError> {
        if labels.is_empty() || features.len() != dim * labels.len() {
            return Err(NnError::EmptyDataset);
        }
        Ok(Self {
            dim,
            features,
            labels,
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

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the selected rows into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, NnError> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Self::new(self.dim, features, labels)
    }
}

/// Deterministic Gaussian initialization, std `1/sqrt(fan_in)` per layer.
pub fn init_model(arch: &MlpArchitecture, seed: u64) -> ParamVec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[stream::INIT]));
    let mut params = Vec::with_capacity(arch.param_count());
    for (fan_in, fan_out) in arch.layers() {
        let scale = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            params.push(scale * rng.sample::<f64, _>(StandardNormal));
        }
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    params
}

fn check_params(params: &[f64], arch: &MlpArchitecture) -> Result<(), NnError> {
    if params.len() != arch.param_count() {
        return Err(NnError::ParamLengthMismatch {
            expected: arch.param_count(),
            got: params.len(),
        });
    }
    Ok(())
}

fn check_data(data: &Dataset, arch: &MlpArchitecture) -> Result<(), NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if data.dim() != arch.input_dim() {
        return Err(NnError::DimensionMismatch {
            expected: arch.input_dim(),
            got: data.dim(),
        });
    }
    let classes = arch.class_count();
    if let Some(&label) = data.labels().iter().find(|&&l| l >= classes) {
        return Err(NnError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Forward pass over all rows of `batch`; activations kept per layer when
/// `keep` is set (needed for the backward pass).
fn forward(
    params: &[f64],
    arch: &MlpArchitecture,
    batch: &Dataset,
    indices: &[usize],
    keep: bool,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let b = indices.len();
    let mut activations: Vec<Vec<f64>> = Vec::new();
    let mut current: Vec<f64> = Vec::with_capacity(b * arch.input_dim());
    for &i in indices {
        current.extend_from_slice(batch.sample(i));
    }
    let n_layers = arch.layer_sizes().len() - 1;
    let mut offset = 0usize;
    for (l, (fan_in, fan_out)) in arch.layers().enumerate() {
        let w = &params[offset..offset + fan_in * fan_out];
        let bias = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let mut next = vec![0.0; b * fan_out];
        for s in 0..b {
            let x = &current[s * fan_in..(s + 1) * fan_in];
            let z = &mut next[s * fan_out..(s + 1) * fan_out];
            z.copy_from_slice(bias);
            for (j, &xj) in x.iter().enumerate() {
                let row = &w[j * fan_out..(j + 1) * fan_out];
                for (zk, &wk) in z.iter_mut().zip(row) {
                    *zk += xj * wk;
                }
            }
        }
        let last = l == n_layers - 1;
        if !last {
            for v in &mut next {
                *v = v.tanh();
            }
        }
        if keep {
            activations.push(current.clone());
        }
        current = next;
    }
    (activations, current)
}

fn softmax_loss(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let b = labels.len();
    let mut probs = logits.to_vec();
    let mut loss = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let row = &mut probs[s * classes..(s + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        loss -= row[label].max(f64::MIN_POSITIVE).ln();
    }
    (loss / b as f64, probs)
}

/// Softmax cross-entropy loss and raw logits for a batch.
pub fn forward_loss(
    params: &[f64],
    arch: &MlpArchitecture,
    batch: &Dataset,
) -> Result<(f64, Vec<f64>), NnError> {
    check_params(params, arch)?;
    check_data(batch, arch)?;
    let indices: Vec<usize> = (0..batch.len()).collect();
    let (_, logits) = forward(params, arch, batch, &indices, false);
    let (loss, _) = softmax_loss(&logits, batch.labels(), arch.class_count());
    Ok((loss, logits))
}

/// Analytic gradient of [`forward_loss`] with respect to every parameter.
pub fn loss_gradient(
    params: &[f64],
    arch: &MlpArchitecture,
    batch: &Dataset,
    indices: &[usize],
) -> Result<(f64, ParamVec), NnError> {
    check_params(params, arch)?;
    check_data(batch, arch)?;
    let b = indices.len();
    let (activations, logits) = forward(params, arch, batch, indices, true);
    let classes = arch.class_count();
    let labels: Vec<usize> = indices.iter().map(|&i| batch.labels()[i]).collect();
    let (loss, mut delta) = softmax_loss(&logits, &labels, classes);
    for (s, &label) in labels.iter().enumerate() {
        delta[s * classes + label] -= 1.0;
    }
    for v in &mut delta {
        *v /= b as f64;
    }

    let mut grad = vec![0.0; params.len()];
    let layer_dims: Vec<(usize, usize)> = arch.layers().collect();
    let mut offsets = Vec::with_capacity(layer_dims.len());
    {
        let mut off = 0;
        for &(fi, fo) in &layer_dims {
            offsets.push(off);
            off += fi * fo + fo;
        }
    }
    for l in (0..layer_dims.len()).rev() {
        let (fan_in, fan_out) = layer_dims[l];
        let off = offsets[l];
        let input = &activations[l];
        {
            let (gw, gb) =
                grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for s in 0..b {
                let d = &delta[s * fan_out..(s + 1) * fan_out];
                let x = &input[s * fan_in..(s + 1) * fan_in];
                for (j, &xj) in x.iter().enumerate() {
                    let row = &mut gw[j * fan_out..(j + 1) * fan_out];
                    for (g, &dk) in row.iter_mut().zip(d) {
                        *g += xj * dk;
                    }
                }
                for (g, &dk) in gb.iter_mut().zip(d) {
                    *g += dk;
                }
            }
        }
        if l > 0 {
            // Propagate through the weights, then the tanh of the previous layer.
            let w = &params[off..off + fan_in * fan_out];
            let mut prev = vec![0.0; b * fan_in];
            for s in 0..b {
                let d = &delta[s * fan_out..(s + 1) * fan_out];
                let x = &input[s * fan_in..(s + 1) * fan_in];
                let pd = &mut prev[s * fan_in..(s + 1) * fan_in];
                for j in 0..fan_in {
                    let row = &w[j * fan_out..(j + 1) * fan_out];
                    let dot: f64 = row.iter().zip(d).map(|(&wk, &dk)| wk * dk).sum();
                    pd[j] = dot * (1.0 - x[j] * x[j]);
                }
            }
            delta = prev;
        }
    }
    Ok((loss, grad))
}

/// Runs local SGD on a shard and returns the parameter delta
/// `W_after - W_before`. Deterministic per seed via a fixed shuffle.
pub fn local_update(
    params: &[f64],
    arch: &MlpArchitecture,
    shard: &Dataset,
    lr: f64,
    local_epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ParamVec, NnError> {
    check_params(params, arch)?;
    check_data(shard, arch)?;
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(NnError::InvalidLearningRate);
    }
    let batch_size = batch_size.clamp(1, shard.len());
    let mut w = params.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[stream::LOCAL_SGD]));
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..local_epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch_size) {
            let (_, grad) = loss_gradient(&w, arch, shard, chunk)?;
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= lr * gi;
            }
        }
    }
    for (d, p) in w.iter_mut().zip(params) {
        *d -= p;
    }
    Ok(w)
}

/// Gaussian class blobs at the default separation; see
/// [`make_synthetic_dataset_with_separation`].
pub fn make_synthetic_dataset(
    class_count: usize,
    samples: usize,
    dim: usize,
    seed: u64,
) -> Result<Dataset, NnError> {
    make_synthetic_dataset_with_separation(
        class_count,
        samples,
        dim,
        DEFAULT_CLASS_SEPARATION,
        seed,
    )
}

/// Gaussian class blobs with balanced labels and unit within-class
/// deviation. Class `c` centers on axis `c mod dim` at
/// `±separation·(1 + c/dim)`.
pub fn make_synthetic_dataset_with_separation(
    class_count: usize,
    samples: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, NnError> {
    if samples == 0 {
        return Err(NnError::EmptyDataset);
    }
    if class_count == 0 || dim == 0 || !(separation > 0.0) {
        return Err(NnError::InvalidArchitecture);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[stream::DATASET]));
    let mut features = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % class_count;
        let axis = label % dim;
        let level = label / dim;
        let sign = if level.is_multiple_of(2) { 1.0 } else { -1.0 };
        let center = sign * separation * (1.0 + level as f64);
        for d in 0..dim {
            let mean = if d == axis { center } else { 0.0 };
            features.push(mean + rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(label);
    }
    Dataset::new(dim, features, labels)
}

/// Label-sorted shard partitioning: sort by label, cut into
/// `n_users·shards_per_user` equal shards, deal shards to users by a seeded
/// permutation. Users end up with a few classes each.
pub fn partition_non_iid(
    dataset: &Dataset,
    n_users: usize,
    shards_per_user: usize,
    seed: u64,
) -> Result<Vec<Dataset>, NnError> {
    let total_shards = n_users * shards_per_user;
    if total_shards == 0 || !dataset.len().is_multiple_of(total_shards) {
        return Err(NnError::IndivisiblePartition {
            samples: dataset.len(),
            shards: total_shards,
        });
    }
    let shard_size = dataset.len() / total_shards;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| (dataset.labels()[i], i));

    let mut shard_ids: Vec<usize> = (0..total_shards).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[stream::PARTITION]));
    for i in (1..shard_ids.len()).rev() {
        let j = rng.random_range(0..=i);
        shard_ids.swap(i, j);
    }

    let mut users = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let mut indices = Vec::with_capacity(shards_per_user * shard_size);
        for s in 0..shards_per_user {
            let shard = shard_ids[u * shards_per_user + s];
            indices.extend_from_slice(&order[shard * shard_size..(shard + 1) * shard_size]);
        }
        users.push(dataset.subset(&indices)?);
    }
    Ok(users)
}

/// Classification accuracy (argmax of logits) and mean loss.
pub fn evaluate(
    params: &[f64],
    arch: &MlpArchitecture,
    test_set: &Dataset,
) -> Result<(f64, f64), NnError> {
    let (loss, logits) = forward_loss(params, arch, test_set)?;
    let classes = arch.class_count();
    let correct = test_set
        .labels()
        .iter()
        .enumerate()
        .filter(|&(s, &label)| {
            let row = &logits[s * classes..(s + 1) * classes];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            best == label
        })
        .count();
    Ok((correct as f64 / test_set.len() as f64, loss))
}
