//! Class-rebalancing: loss weights, class-balanced re-sampling, deferred
//! re-weighting and mixup.
//!
//! Every weight scheme is normalized to mean 1, so swapping schemes does not
//! change the overall loss scale.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;

/// Per-class training counts; every class has at least one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ClassCounts(Vec<usize>);

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("class counts: no classes"));
        }
        if let Some(class) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass { class });
        }
        Ok(Self(counts))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn max(&self) -> usize {
        *self.0.iter().max().expect("non-empty")
    }

    pub fn min(&self) -> usize {
        *self.0.iter().min().expect("non-empty")
    }
}

impl TryFrom<Vec<usize>> for ClassCounts {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClassCounts> for Vec<usize> {
    fn from(c: ClassCounts) -> Self {
        c.0
    }
}

/// Per-class loss weights with mean 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes])
    }

    /// Rescale arbitrary positive weights to mean 1.
    pub fn normalized(raw: Vec<f64>) -> Result<Self> {
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        if raw.is_empty() || !(mean > 0.0) || !mean.is_finite() {
            return Err(Error::invalid("class weights must be positive and finite"));
        }
        Ok(Self(raw.into_iter().map(|w| w / mean).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_uniform(&self) -> bool {
        self.0.iter().all(|&w| w == 1.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightScheme {
    #[default]
    InverseFrequency,
    EffectiveNumber {
        beta: f64,
    },
}

impl WeightScheme {
    pub fn weights(&self, counts: &ClassCounts) -> Result<ClassWeights> {
        match *self {
            WeightScheme::InverseFrequency => Ok(inverse_frequency_weights(counts)),
            WeightScheme::EffectiveNumber { beta } => effective_number_weights(counts, beta),
        }
    }
}

/// `w_c ∝ 1/n_c`.
pub fn inverse_frequency_weights(counts: &ClassCounts) -> ClassWeights {
    ClassWeights::normalized(counts.as_slice().iter().map(|&n| 1.0 / n as f64).collect())
        .expect("positive counts give positive weights")
}

/// `w_c ∝ (1 − β)/(1 − β^{n_c})`.
pub fn effective_number_weights(counts: &ClassCounts, beta: f64) -> Result<ClassWeights> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid(format!(
            "effective number beta must be in [0, 1), got {beta}"
        )));
    }
    if beta == 0.0 {
        return Ok(ClassWeights::uniform(counts.num_classes()));
    }
    let ln_beta = beta.ln();
    // 1 − β^n evaluated as −expm1(n ln β) to keep precision as β → 1.
    let raw = counts
        .as_slice()
        .iter()
        .map(|&n| (1.0 - beta) / -(n as f64 * ln_beta).exp_m1())
        .collect();
    ClassWeights::normalized(raw)
}

/// Which rebalancing weights each method uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RebalanceConfig {
    /// Loss weights for one-stage re-weighting (RW).
    pub reweight: WeightScheme,
    /// Target weights of deferred re-weighting (CE-DRW, LDAM-DRW).
    pub drw_weights: WeightScheme,
    /// Epoch at which DRW switches on; `None` means 80% of the run.
    pub drw_switch_epoch: Option<usize>,
    pub mixup_alpha: f64,
    /// Loss weights for classifier re-training (cRW).
    pub classifier_weights: WeightScheme,
}

impl Default for RebalanceConfig {
    fn default() -> Self {
        Self {
            reweight: WeightScheme::InverseFrequency,
            drw_weights: WeightScheme::EffectiveNumber { beta: 0.9999 },
            drw_switch_epoch: None,
            mixup_alpha: 0.2,
            classifier_weights: WeightScheme::InverseFrequency,
        }
    }
}

impl RebalanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, scheme) in [
            ("reweight", self.reweight),
            ("drw_weights", self.drw_weights),
            ("classifier_weights", self.classifier_weights),
        ] {
            if let WeightScheme::EffectiveNumber { beta } = scheme {
                if !(0.0..1.0).contains(&beta) {
                    return Err(Error::Config {
                        field: format!("rebalance.{field}.beta"),
                        message: format!("must be in [0, 1), got {beta}"),
                    });
                }
            }
        }
        if !(self.mixup_alpha > 0.0) || !self.mixup_alpha.is_finite() {
            return Err(Error::Config {
                field: "rebalance.mixup_alpha".into(),
                message: format!("must be > 0, got {}", self.mixup_alpha),
            });
        }
        Ok(())
    }

    pub fn drw_schedule(&self, counts: &ClassCounts, total_epochs: usize) -> Result<DrwSchedule> {
        let target = self.drw_weights.weights(counts)?;
        Ok(match self.drw_switch_epoch {
            Some(switch_epoch) => DrwSchedule {
                switch_epoch,
                target,
            },
            None => DrwSchedule::deferred(total_epochs, target),
        })
    }
}

/// Uniform weights before `switch_epoch`, `target` from it onward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrwSchedule {
    pub switch_epoch: usize,
    pub target: ClassWeights,
}

impl DrwSchedule {
    /// Switch at 80% of the run.
    pub fn deferred(total_epochs: usize, target: ClassWeights) -> Self {
        Self {
            switch_epoch: total_epochs * 4 / 5,
            target,
        }
    }

    pub fn weights_at(&self, epoch: usize) -> ClassWeights {
        if epoch < self.switch_epoch {
            ClassWeights::uniform(self.target.as_slice().len())
        } else {
            self.target.clone()
        }
    }
}

pub fn drw_weights(schedule: &DrwSchedule, epoch: usize) -> ClassWeights {
    schedule.weights_at(epoch)
}

/// Endless stream of sample indices: a class uniformly at random, then a
/// member of that class uniformly at random, with replacement.
#[derive(Clone, Debug)]
pub struct ClassBalancedSampler {
    members: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl ClassBalancedSampler {
    /// Samples laid out contiguously by class: class 0 occupies indices
    /// `0..n_0`, class 1 the next `n_1`, and so on.
    pub fn from_counts(counts: &[usize], seed: u64) -> Result<Self> {
        let mut start = 0;
        let mut members = Vec::with_capacity(counts.len());
        for &n in counts {
            members.push((start..start + n).collect());
            start += n;
        }
        Self::from_members(members, seed)
    }

    pub fn from_labels(labels: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let mut members = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            members
                .get_mut(y)
                .ok_or(Error::LabelOutOfRange {
                    label: y,
                    num_classes,
                })?
                .push(i);
        }
        Self::from_members(members, seed)
    }

    fn from_members(members: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("sampler: no classes"));
        }
        if let Some(class) = members.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass { class });
        }
        Ok(Self {
            members,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Next `(class, sample index)` pair.
    pub fn draw(&mut self) -> (usize, usize) {
        let class = self.rng.random_range(0..self.members.len());
        let pool = &self.members[class];
        (class, pool[self.rng.random_range(0..pool.len())])
    }
}

impl Iterator for ClassBalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.draw().1)
    }
}

pub fn class_balanced_sampler(counts: &ClassCounts, seed: u64) -> ClassBalancedSampler {
    ClassBalancedSampler::from_counts(counts.as_slice(), seed).expect("ClassCounts are positive")
}

/// A mixed batch `x̃ = λ·x + (1 − λ)·x[perm]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub partner_labels: Vec<usize>,
    pub lambda: f64,
}

/// Mix with an explicit coefficient and partner permutation.
pub fn mixup_with(x: &Tensor, labels: &[usize], lambda: f64, perm: &[usize]) -> Result<MixupBatch> {
    let b = *x.shape().first().unwrap_or(&0);
    if labels.len() != b || perm.len() != b {
        return Err(Error::invalid(
            "mixup: batch, labels and permutation lengths differ",
        ));
    }
    let partner = x.select_rows(perm);
    let data = x
        .data()
        .iter()
        .zip(partner.data())
        .map(|(a, p)| lambda * a + (1.0 - lambda) * p)
        .collect();
    Ok(MixupBatch {
        inputs: Tensor::new(x.shape().to_vec(), data)?,
        labels: labels.to_vec(),
        partner_labels: perm.iter().map(|&i| labels[i]).collect(),
        lambda,
    })
}

/// `λ ~ Beta(α, α)` and a uniformly random partner permutation.
pub fn mixup_batch(
    x: &Tensor,
    labels: &[usize],
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<MixupBatch> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!(
            "mixup alpha must be > 0, got {alpha}"
        )));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(format!("mixup: {e}")))?;
    let lambda = beta.sample(rng);
    let mut perm: Vec<usize> = (0..labels.len()).collect();
    perm.shuffle(rng);
    mixup_with(x, labels, lambda, &perm)
}

/// `λ·CE(logits, y) + (1 − λ)·CE(logits, y_perm)`.
pub fn mixup_cross_entropy(
    g: &mut Graph,
    logits: Var,
    batch: &MixupBatch,
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    let a = cross_entropy(g, logits, &batch.labels, class_weights)?;
    let b = cross_entropy(g, logits, &batch.partner_labels, class_weights)?;
    let a = g.scale(a, batch.lambda);
    let b = g.scale(b, 1.0 - batch.lambda);
    g.add(a, b)
}
