//! Labeled datasets, long-tail subset construction, splits, augmentation and
//! a synthetic Gaussian generator.

mod augment;
mod io;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::InputShape;
use crate::rebalance::ClassCounts;

pub use augment::{augment, augment_with, flip_horizontal, pad_crop, rotate_nearest, AugmentSpec};
pub use io::{
    decode_dataset, encode_dataset, read_csv, read_dataset, write_csv, write_dataset,
    DATASET_MAGIC, DATASET_VERSION,
};

/// `N` samples of a fixed input shape, stored row-major in one buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    shape: InputShape,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        shape: InputShape,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let width = shape.numel();
        if width == 0 || num_classes == 0 {
            return Err(Error::invalid(
                "dataset needs a non-empty input shape and at least one class",
            ));
        }
        if features.len() != labels.len() * width {
            return Err(Error::invalid(format!(
                "{} feature values do not fill {} samples of width {width}",
                features.len(),
                labels.len()
            )));
        }
        let mut counts = vec![0; num_classes];
        for &y in &labels {
            *counts.get_mut(y).ok_or(Error::LabelOutOfRange {
                label: y,
                num_classes,
            })? += 1;
        }
        Ok(Self {
            shape,
            num_classes,
            features,
            labels,
            counts,
        })
    }

    pub fn shape(&self) -> &InputShape {
        &self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.shape.numel()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.feature_len();
        &self.features[i * w..(i + 1) * w]
    }

    /// Per-class sample counts; zero entries allowed.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Per-class counts, failing if any class is empty.
    pub fn class_counts(&self) -> Result<ClassCounts> {
        ClassCounts::new(self.counts.clone())
    }

    /// Indices of every sample, grouped by class in dataset order.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            members[y].push(i);
        }
        members
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let w = self.feature_len();
        let mut features = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.shape.clone(), self.num_classes, features, labels)
            .expect("subset of a valid dataset")
    }

    /// Stack samples into a batch tensor shaped for the model input.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.feature_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor::new(self.shape.batch_shape(indices.len()), data).expect("batch shape matches")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailProfile {
    #[default]
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailSpec {
    pub rho: f64,
    pub n_max: usize,
    #[serde(default)]
    pub profile: TailProfile,
    #[serde(default)]
    pub seed: u64,
}

impl LongTailSpec {
    pub fn new(rho: f64, n_max: usize, seed: u64) -> Self {
        Self {
            rho,
            n_max,
            profile: TailProfile::Exponential,
            seed,
        }
    }

    pub fn counts(&self, num_classes: usize) -> Result<Vec<usize>> {
        long_tail_counts(num_classes, self.n_max, self.rho)
    }
}

/// `n_c = round(n_max · ρ^(−c/(K−1)))`.
pub fn long_tail_counts(num_classes: usize, n_max: usize, rho: f64) -> Result<Vec<usize>> {
    if num_classes == 0 || n_max == 0 {
        return Err(Error::invalid(
            "long-tail profile needs at least one class and n_max ≥ 1",
        ));
    }
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(Error::invalid(format!(
            "imbalance ratio must be ≥ 1, got {rho}"
        )));
    }
    if num_classes == 1 {
        return Ok(vec![n_max]);
    }
    let k1 = (num_classes - 1) as f64;
    let counts: Vec<usize> = (0..num_classes)
        .map(|c| (n_max as f64 * rho.powf(-(c as f64) / k1)).round() as usize)
        .collect();
    if counts.contains(&0) {
        return Err(Error::invalid(format!(
            "n_max {n_max} with ρ = {rho} leaves an empty class"
        )));
    }
    Ok(counts)
}

/// Keep `n_c` samples of class `c`, chosen uniformly without replacement.
/// Retained samples keep their original relative order.
pub fn make_long_tail(dataset: &LabeledDataset, spec: &LongTailSpec) -> Result<LabeledDataset> {
    let target = spec.counts(dataset.num_classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut keep = Vec::with_capacity(target.iter().sum());
    for (c, (mut members, &n)) in dataset.class_members().into_iter().zip(&target).enumerate() {
        if members.len() < n {
            return Err(Error::invalid(format!(
                "class {c} has {} samples but the profile requests {n}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..n]);
    }
    keep.sort_unstable();
    Ok(dataset.subset(&keep))
}

/// `max(n_c) / min(n_c)`.
pub fn compute_imbalance_ratio(counts: &ClassCounts) -> f64 {
    counts.max() as f64 / counts.min() as f64
}

/// Per-class proportional split into train/val/test with largest-remainder
/// rounding.
pub fn stratified_split(
    dataset: &LabeledDataset,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (c, mut members) in dataset.class_members().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < ratios.len() {
            return Err(Error::invalid(format!(
                "class {c} has {} samples, fewer than the {} partitions",
                members.len(),
                ratios.len()
            )));
        }
        members.shuffle(&mut rng);
        let mut start = 0;
        for (part, n) in parts
            .iter_mut()
            .zip(largest_remainder(members.len(), &ratios))
        {
            part.extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    let [train, val, test] = parts.map(|mut idx| {
        idx.sort_unstable();
        dataset.subset(&idx)
    });
    Ok((train, val, test))
}

fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // Stable sort: ties go to the earlier partition.
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = n - alloc.iter().sum::<usize>();
    for &i in order.iter().cycle().take(short) {
        alloc[i] += 1;
    }
    alloc
}

/// Isotropic unit-variance Gaussian classes with means on orthonormal
/// directions, pairwise `separation` apart.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    means: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(num_classes: usize, dims: usize, separation: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("synthetic data needs at least two classes"));
        }
        if dims < num_classes {
            return Err(Error::invalid(format!(
                "synthetic data needs dims ≥ classes for orthogonal means, got {dims} < {num_classes}"
            )));
        }
        if !(separation > 0.0) || !separation.is_finite() {
            return Err(Error::invalid(format!(
                "class separation must be > 0, got {separation}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        while basis.len() < num_classes {
            let mut v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        // Orthonormal e_i, e_j are √2 apart.
        let scale = separation / std::f64::consts::SQRT_2;
        let means = basis
            .into_iter()
            .map(|b| b.into_iter().map(|x| x * scale).collect())
            .collect();
        Ok(Self { means })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn dims(&self) -> usize {
        self.means[0].len()
    }

    /// Draw `counts[c]` samples of each class, grouped by class. Values are
    /// rounded to `f32` precision so the binary dataset format stores them
    /// exactly.
    pub fn sample(&self, counts: &[usize], seed: u64) -> Result<LabeledDataset> {
        if counts.len() != self.means.len() {
            return Err(Error::invalid("one count per class required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::with_capacity(counts.iter().sum::<usize>() * self.dims());
        let mut labels = Vec::with_capacity(counts.iter().sum());
        for (c, (&n, mean)) in counts.iter().zip(&self.means).enumerate() {
            for _ in 0..n {
                for &m in mean {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    features.push((m + noise) as f32 as f64);
                }
                labels.push(c);
            }
        }
        LabeledDataset::new(
            InputShape::Vector { dim: self.dims() },
            self.means.len(),
            features,
            labels,
        )
    }
}

/// Long-tailed synthetic training set; see [`GaussianMixture`].
pub fn synth_gaussian_longtail(
    num_classes: usize,
    dims: usize,
    rho: f64,
    n_max: usize,
    class_separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let mixture = GaussianMixture::new(num_classes, dims, class_separation, seed)?;
    mixture.sample(
        &long_tail_counts(num_classes, n_max, rho)?,
        sample_seed(seed, 0),
    )
}

/// Seed for the `stream`-th sample draw from a mixture built with `seed`.
/// Stream 0 is the training set; other streams give independent held-out
/// sets from the same class means.
pub fn sample_seed(seed: u64, stream: u64) -> u64 {
    seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stream + 1))
}
