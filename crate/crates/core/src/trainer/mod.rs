//! Optimizer, learning-rate schedule and the two training stages.
//!
//! Stage 1 trains the whole network with a method's loss. Stage 2 freezes
//! the extractor and projection head and re-trains only the classifier head
//! with class re-weighting (cRW) or class-balanced re-sampling (cRS).

mod method;
mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{augment_with, AugmentSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{
    composite_stage1_loss, cross_entropy, focal_loss, ldam_loss, metric_loss, CenterState,
    FocalConfig, LdamConfig, MetricInputs, MetricKind, MetricLossConfig, SupConConfig,
    TripletConfig,
};
use crate::metrics::{confusion, make_groups, mean_class_recall, EvalReport, GroupSpec};
use crate::model::{BoundParams, InputShape, NetworkParams, NetworkSpec, Part};
use crate::rebalance::{
    mixup_batch, mixup_cross_entropy, ClassBalancedSampler, ClassCounts, ClassWeights,
    RebalanceConfig,
};

pub use method::{Method, Stage1Method, Stage2Kind};
pub use optim::{lr_at, LrSchedule, Sgd, SgdConfig};

/// Optimizer state name for the center-loss centers.
pub const CENTERS_NAME: &str = "center_loss.centers";

/// Loss hyperparameters; each method reads the fields it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    /// Metric-loss coefficient; `None` takes the metric's default.
    pub lambda: Option<f64>,
    pub triplet: TripletConfig,
    pub supcon: SupConConfig,
    pub focal_gamma: f64,
    pub cb_beta: f64,
    pub ldam_max_margin: f64,
    /// LDAM logit scale. The network head is linear, so any scale is
    /// absorbed by the head weights and acts as a learning-rate multiplier;
    /// the default is 1. (A scale of 30 belongs with cosine logits.)
    pub ldam_scale: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        let ldam = LdamConfig::default();
        Self {
            lambda: None,
            triplet: TripletConfig::default(),
            supcon: SupConConfig::default(),
            focal_gamma: FocalConfig::default().gamma,
            cb_beta: FocalConfig::default().beta,
            ldam_max_margin: ldam.max_margin,
            ldam_scale: 1.0,
        }
    }
}

impl LossParams {
    pub fn metric_config(&self, kind: MetricKind) -> MetricLossConfig {
        MetricLossConfig {
            kind,
            lambda: self.lambda.unwrap_or(kind.default_lambda()),
            triplet: self.triplet,
            supcon: self.supcon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::Config {
                    field: "stage1.loss.lambda".into(),
                    message: format!("must be finite and >= 0, got {l}"),
                });
            }
        }
        self.triplet.validate()?;
        self.supcon.validate()?;
        self.focal(false).validate()?;
        self.ldam().validate()
    }

    fn focal(&self, class_balanced: bool) -> FocalConfig {
        FocalConfig {
            gamma: self.focal_gamma,
            class_balanced,
            beta: self.cb_beta,
        }
    }

    fn ldam(&self) -> LdamConfig {
        LdamConfig {
            max_margin: self.ldam_max_margin,
            scale: self.ldam_scale,
            drw: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    pub loss: LossParams,
    /// Applied to image inputs only.
    pub augment: AugmentSpec,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self::desk()
    }
}

impl Stage1Config {
    /// Reduced budget for small synthetic problems: 30 epochs.
    pub fn desk() -> Self {
        Self {
            sgd: SgdConfig::default(),
            schedule: LrSchedule {
                warmup_epochs: 3,
                peak_lr: 0.01,
                min_lr: 1e-6,
                total_epochs: 30,
            },
            loss: LossParams::default(),
            augment: AugmentSpec::default(),
        }
    }

    /// 100 epochs with the learning rates used for full-size training.
    pub fn full() -> Self {
        Self {
            schedule: LrSchedule::full_stage1(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    /// Start the head from a fresh initialization instead of continuing.
    pub reinit_head: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            schedule: LrSchedule::full_stage2(),
            reinit_head: false,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.schedule.validate()
    }
}

/// Configuration of both stages and the rebalancing they use.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePlan {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub rebalance: RebalanceConfig,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.rebalance.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean class recall on the validation set, when every class is present.
    pub val_mcr: Option<f64>,
}

/// Result of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub params: NetworkParams,
    /// Learned centers, for methods with a center loss.
    pub centers: Option<Tensor>,
    pub epochs: Vec<EpochRecord>,
}

/// Shuffle (or class-balanced draw) the epoch's indices and cut batches.
/// A trailing batch of one sample is dropped since metric losses need pairs.
fn epoch_batches(
    n: usize,
    sampler: Option<&mut ClassBalancedSampler>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let order: Vec<usize> = match sampler {
        Some(s) => s.take(n).collect(),
        None => {
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(rng);
            v
        }
    };
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
    }
    batches
}

fn apply_updates(
    g: &Graph,
    bound: &BoundParams,
    params: &mut NetworkParams,
    opt: &mut Sgd,
    lr: f64,
) -> Result<()> {
    for part in Part::ALL {
        if params.is_frozen(part) {
            continue;
        }
        let group = params.group_mut(part);
        for (i, &v) in bound.part(part).iter().enumerate() {
            opt.step(&group.names[i], &mut group.tensors[i], g.grad(v), lr)?;
        }
    }
    Ok(())
}

fn check_loss(g: &Graph, loss: Var, stage: u8, epoch: usize, batch: usize) -> Result<f64> {
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!(
            "stage {stage} loss is {v} at epoch {epoch}, batch {batch}"
        )));
    }
    Ok(v)
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

fn augmented_batch(
    ds: &LabeledDataset,
    idx: &[usize],
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let batch = ds.batch(idx);
    let InputShape::Image {
        channels,
        height,
        width,
    } = *ds.shape()
    else {
        return Ok(batch);
    };
    if spec.is_identity() {
        return Ok(batch);
    }
    let shape = (channels, height, width);
    let mut data = Vec::with_capacity(batch.numel());
    for &i in idx {
        data.extend(augment_with(ds.sample(i), shape, spec, rng)?);
    }
    Tensor::new(batch.shape().to_vec(), data)
}

/// Predicted class for every sample, in dataset order.
pub fn predict_dataset(params: &NetworkParams, ds: &LabeledDataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(512) {
        out.extend(params.predict(&ds.batch(chunk))?);
    }
    Ok(out)
}

/// Extractor features for every sample, N×feature_dim.
pub fn dataset_features(params: &NetworkParams, ds: &LabeledDataset) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ds.len() * params.spec().feature_dim);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(512) {
        data.extend_from_slice(params.features(&ds.batch(chunk))?.data());
    }
    Tensor::new(vec![ds.len(), params.spec().feature_dim], data)
}

fn validation_mcr(params: &NetworkParams, val: Option<&LabeledDataset>) -> Result<Option<f64>> {
    let Some(val) = val else { return Ok(None) };
    if val.counts().contains(&0) {
        return Ok(None);
    }
    let cm = confusion(
        &predict_dataset(params, val)?,
        val.labels(),
        val.num_classes(),
    )?;
    Ok(Some(mean_class_recall(&cm, None)?))
}

/// Report on `test` with groups ranked by `train_counts`.
pub fn evaluate(
    params: &NetworkParams,
    test: &LabeledDataset,
    train_counts: &ClassCounts,
    groups: GroupSpec,
    seed: u64,
) -> Result<EvalReport> {
    let groups = make_groups(train_counts, groups)?;
    let cm = confusion(
        &predict_dataset(params, test)?,
        test.labels(),
        test.num_classes(),
    )?;
    EvalReport::from_confusion(&cm, &groups, seed)
}

fn check_dataset(params: &NetworkParams, ds: &LabeledDataset) -> Result<()> {
    let spec = params.spec();
    if *ds.shape() != spec.input || ds.num_classes() != spec.num_classes {
        return Err(Error::invalid(format!(
            "dataset ({:?}, {} classes) does not match the network ({:?}, {} classes)",
            ds.shape(),
            ds.num_classes(),
            spec.input,
            spec.num_classes
        )));
    }
    Ok(())
}

/// Stage 1: train every part the method uses.
///
/// The projection head is trained only when the supervised contrastive loss
/// is active, and the classifier head only when cross-entropy is. A metric
/// coefficient of zero drops the metric term entirely, so such a run equals
/// plain cross-entropy bit for bit.
pub fn train_stage1(
    mut params: NetworkParams,
    method: Stage1Method,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    plan: &StagePlan,
    seed: u64,
) -> Result<StageOutcome> {
    plan.validate()?;
    let cfg = &plan.stage1;
    let reb = &plan.rebalance;
    check_dataset(&params, train)?;
    let counts = train.class_counts()?;
    let p = &cfg.loss;
    let metric = method
        .metric()
        .map(|kind| p.metric_config(kind))
        .filter(|m| m.lambda > 0.0 || !method.uses_cross_entropy());
    let uses_projection = metric.is_some_and(|m| m.kind == MetricKind::Supcon);
    params.set_frozen(Part::Extractor, false);
    params.set_frozen(Part::Projection, !uses_projection);
    params.set_frozen(Part::Head, !method.uses_cross_entropy());
    let mut centers = metric
        .filter(|m| m.kind == MetricKind::Center)
        .map(|_| CenterState::new(counts.num_classes(), params.spec().feature_dim).centers);

    let mut rng = stage_rng(seed, 1);
    let mut sampler = match method {
        Stage1Method::Rs => Some(ClassBalancedSampler::from_labels(
            train.labels(),
            train.num_classes(),
            rng.random(),
        )?),
        _ => None,
    };
    let rw = reb.reweight.weights(&counts)?;
    let drw = reb.drw_schedule(&counts, cfg.schedule.total_epochs)?;
    let mut opt = Sgd::new(cfg.sgd);
    let mut epochs = Vec::with_capacity(cfg.schedule.total_epochs);

    for epoch in 0..cfg.schedule.total_epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        let batches = epoch_batches(train.len(), sampler.as_mut(), cfg.sgd.batch_size, &mut rng);
        let drw_now = drw.weights_at(epoch);
        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let labels = train.batch_labels(idx);
            let inputs = augmented_batch(train, idx, &cfg.augment, &mut rng)?;
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let center_var = centers.as_ref().map(|c| g.leaf(c.clone()));
            let mix = match method {
                Stage1Method::Mixup => {
                    Some(mixup_batch(&inputs, &labels, reb.mixup_alpha, &mut rng)?)
                }
                _ => None,
            };
            let x = g.constant(mix.as_ref().map_or(inputs, |m| m.inputs.clone()));
            let r = params.forward_features(&mut g, &bound, x)?;
            let logits = if method.uses_cross_entropy() {
                Some(params.forward_logits(&mut g, &bound, r)?)
            } else {
                None
            };
            let metric_inputs = MetricInputs {
                features: Some(r),
                projections: if uses_projection {
                    Some(params.forward_projection(&mut g, &bound, r)?)
                } else {
                    None
                },
                centers: center_var,
            };
            let lg = || logits.expect("cross-entropy methods compute logits");
            let loss = match method {
                Stage1Method::Ce | Stage1Method::Rs => cross_entropy(&mut g, lg(), &labels, None)?,
                Stage1Method::Rw => cross_entropy(&mut g, lg(), &labels, Some(rw.as_slice()))?,
                Stage1Method::CeDrw => {
                    cross_entropy(&mut g, lg(), &labels, Some(drw_now.as_slice()))?
                }
                Stage1Method::Focal => {
                    focal_loss(&mut g, lg(), &labels, &p.focal(false), Some(&counts))?
                }
                Stage1Method::CbFocal => {
                    focal_loss(&mut g, lg(), &labels, &p.focal(true), Some(&counts))?
                }
                Stage1Method::Ldam => ldam_loss(&mut g, lg(), &labels, &counts, &p.ldam(), None)?,
                Stage1Method::LdamDrw => ldam_loss(
                    &mut g,
                    lg(),
                    &labels,
                    &counts,
                    &p.ldam(),
                    Some(drw_now.as_slice()),
                )?,
                Stage1Method::Mixup => {
                    mixup_cross_entropy(&mut g, lg(), mix.as_ref().expect("mixup batch"), None)?
                }
                Stage1Method::CeCt | Stage1Method::CeTp | Stage1Method::CeSc => match &metric {
                    Some(m) => composite_stage1_loss(&mut g, lg(), &metric_inputs, &labels, m)?,
                    None => cross_entropy(&mut g, lg(), &labels, None)?,
                },
                // The coefficient only balances L_M against cross-entropy.
                Stage1Method::Sc => {
                    let m = metric.as_ref().expect("metric-only method");
                    metric_loss(&mut g, &metric_inputs, &labels, m)?.loss
                }
            };
            loss_sum += check_loss(&g, loss, 1, epoch, b)?;
            g.backward(loss)?;
            apply_updates(&g, &bound, &mut params, &mut opt, lr)?;
            if let (Some(c), Some(v)) = (centers.as_mut(), center_var) {
                opt.step(CENTERS_NAME, c, g.grad(v), lr)?;
            }
        }
        epochs.push(EpochRecord {
            stage: 1,
            epoch,
            lr,
            train_loss: loss_sum / batches.len().max(1) as f64,
            val_mcr: validation_mcr(&params, val)?,
        });
    }
    for part in Part::ALL {
        params.set_frozen(part, false);
    }
    Ok(StageOutcome {
        params,
        centers,
        epochs,
    })
}

/// Stage 2: re-train the classifier head on frozen features.
///
/// Extractor and projection tensors come back bit-identical. Features are
/// computed once up front since the extractor cannot change.
pub fn train_stage2(
    mut params: NetworkParams,
    kind: Stage2Kind,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    plan: &StagePlan,
    seed: u64,
) -> Result<StageOutcome> {
    plan.validate()?;
    let cfg = &plan.stage2;
    check_dataset(&params, train)?;
    let counts = train.class_counts()?;
    let frozen_before = [
        params.group(Part::Extractor).tensors.clone(),
        params.group(Part::Projection).tensors.clone(),
    ];
    if cfg.reinit_head {
        let fresh = NetworkParams::init(params.spec(), seed ^ 0x5eed_4ead)?;
        params.group_mut(Part::Head).tensors = fresh.group(Part::Head).tensors.clone();
    }
    params.set_frozen(Part::Extractor, true);
    params.set_frozen(Part::Projection, true);
    params.set_frozen(Part::Head, false);

    let features = dataset_features(&params, train)?;
    let mut rng = stage_rng(seed, 2);
    let mut sampler = match kind {
        Stage2Kind::Crs => Some(ClassBalancedSampler::from_labels(
            train.labels(),
            train.num_classes(),
            rng.random(),
        )?),
        Stage2Kind::Crw => None,
    };
    let weights = match kind {
        Stage2Kind::Crw => Some(plan.rebalance.classifier_weights.weights(&counts)?),
        Stage2Kind::Crs => None,
    };
    let mut opt = Sgd::new(cfg.sgd);
    let mut epochs = Vec::with_capacity(cfg.schedule.total_epochs);
    for epoch in 0..cfg.schedule.total_epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        let batches = epoch_batches(train.len(), sampler.as_mut(), cfg.sgd.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let labels = train.batch_labels(idx);
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let r = g.constant(features.select_rows(idx));
            let logits = params.forward_logits(&mut g, &bound, r)?;
            let loss = cross_entropy(
                &mut g,
                logits,
                &labels,
                weights.as_ref().map(ClassWeights::as_slice),
            )?;
            loss_sum += check_loss(&g, loss, 2, epoch, b)?;
            g.backward(loss)?;
            apply_updates(&g, &bound, &mut params, &mut opt, lr)?;
        }
        epochs.push(EpochRecord {
            stage: 2,
            epoch,
            lr,
            train_loss: loss_sum / batches.len().max(1) as f64,
            val_mcr: validation_mcr(&params, val)?,
        });
    }
    for part in Part::ALL {
        params.set_frozen(part, false);
    }
    assert!(
        params.group(Part::Extractor).tensors == frozen_before[0]
            && params.group(Part::Projection).tensors == frozen_before[1],
        "stage 2 modified a frozen part"
    );
    Ok(StageOutcome {
        params,
        centers: None,
        epochs,
    })
}

/// Everything a method run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub stage1: StageOutcome,
    pub stage2: Option<StageOutcome>,
}

impl RunOutcome {
    /// Parameters of the last stage run.
    pub fn final_params(&self) -> &NetworkParams {
        &self.stage2.as_ref().unwrap_or(&self.stage1).params
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.stage1
            .epochs
            .iter()
            .chain(self.stage2.iter().flat_map(|s| &s.epochs))
    }
}

/// Initialize a network from `seed` and run `method` on it.
pub fn run_baseline(
    method: Method,
    spec: &NetworkSpec,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    plan: &StagePlan,
    seed: u64,
) -> Result<RunOutcome> {
    let init = NetworkParams::init(spec, seed)?;
    let s1 = train_stage1(init, method.stage1, train, val, plan, seed)?;
    let s2 = match method.stage2 {
        Some(kind) => Some(train_stage2(
            s1.params.clone(),
            kind,
            train,
            val,
            plan,
            seed,
        )?),
        None => None,
    };
    Ok(RunOutcome {
        method,
        seed,
        stage1: s1,
        stage2: s2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian_longtail;

    fn tiny() -> (LabeledDataset, NetworkSpec) {
        let ds = synth_gaussian_longtail(3, 4, 4.0, 40, 6.0, 1).unwrap();
        let spec = NetworkSpec::default_vector(4, 3);
        (ds, spec)
    }

    fn short() -> StagePlan {
        let mut plan = StagePlan::default();
        plan.stage1.schedule = LrSchedule {
            warmup_epochs: 1,
            peak_lr: 0.05,
            min_lr: 1e-4,
            total_epochs: 3,
        };
        plan
    }

    #[test]
    fn batches_drop_only_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sizes = |n| {
            epoch_batches(n, None, 4, &mut ChaCha8Rng::seed_from_u64(0))
                .iter()
                .map(Vec::len)
                .collect::<Vec<_>>()
        };
        assert_eq!(sizes(9), vec![4, 4]);
        assert_eq!(sizes(10), vec![4, 4, 2]);
        let mut all: Vec<usize> = epoch_batches(10, None, 4, &mut rng).concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn zero_epochs_leave_initialization() {
        let (ds, spec) = tiny();
        let init = NetworkParams::init(&spec, 3).unwrap();
        let mut cfg = short();
        cfg.stage1.schedule.total_epochs = 0;
        cfg.stage1.schedule.warmup_epochs = 0;
        let out = train_stage1(init.clone(), Stage1Method::CeSc, &ds, None, &cfg, 3).unwrap();
        assert_eq!(out.params, init);
        assert!(out.epochs.is_empty());
    }

    #[test]
    fn zero_lambda_matches_plain_ce() {
        let (ds, spec) = tiny();
        let init = NetworkParams::init(&spec, 3).unwrap();
        let ce = train_stage1(init.clone(), Stage1Method::Ce, &ds, None, &short(), 9).unwrap();
        for m in [Stage1Method::CeSc, Stage1Method::CeCt, Stage1Method::CeTp] {
            let mut cfg = short();
            cfg.stage1.loss.lambda = Some(0.0);
            let out = train_stage1(init.clone(), m, &ds, None, &cfg, 9).unwrap();
            assert_eq!(out.params, ce.params);
            assert_eq!(out.epochs, ce.epochs);
        }
    }

    #[test]
    fn every_method_runs_and_is_deterministic() {
        let (ds, spec) = tiny();
        for m in Stage1Method::ALL {
            let a = run_baseline(Method::one_stage(m), &spec, &ds, Some(&ds), &short(), 4).unwrap();
            let b = run_baseline(Method::one_stage(m), &spec, &ds, Some(&ds), &short(), 4).unwrap();
            assert_eq!(a, b, "{m:?}");
            assert!(a.epochs().all(|e| e.train_loss.is_finite()), "{m:?}");
        }
    }

    #[test]
    fn stage2_freezes_extractor_and_projection() {
        let (ds, spec) = tiny();
        for kind in [Stage2Kind::Crw, Stage2Kind::Crs] {
            let run = run_baseline(
                Method::two_stage(Stage1Method::CeSc, kind),
                &spec,
                &ds,
                None,
                &short(),
                2,
            )
            .unwrap();
            let s1 = &run.stage1.params;
            let s2 = &run.stage2.as_ref().unwrap().params;
            assert_eq!(s1.group(Part::Extractor), s2.group(Part::Extractor));
            assert_eq!(s1.group(Part::Projection), s2.group(Part::Projection));
            assert_ne!(s1.group(Part::Head), s2.group(Part::Head));
        }
    }

    #[test]
    fn metric_only_stage1_leaves_head_alone() {
        let (ds, spec) = tiny();
        let init = NetworkParams::init(&spec, 3).unwrap();
        let out = train_stage1(init.clone(), Stage1Method::Sc, &ds, None, &short(), 1).unwrap();
        assert_eq!(out.params.group(Part::Head), init.group(Part::Head));
        assert_ne!(
            out.params.group(Part::Extractor),
            init.group(Part::Extractor)
        );
        let ce = train_stage1(init.clone(), Stage1Method::Ce, &ds, None, &short(), 1).unwrap();
        assert_eq!(
            ce.params.group(Part::Projection),
            init.group(Part::Projection)
        );
    }

    #[test]
    fn center_loss_trains_centers() {
        let (ds, spec) = tiny();
        let init = NetworkParams::init(&spec, 3).unwrap();
        let out = train_stage1(init, Stage1Method::CeCt, &ds, None, &short(), 1).unwrap();
        let c = out.centers.unwrap();
        assert_eq!(c.shape(), &[3, spec.feature_dim]);
        assert!(c.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn non_finite_loss_is_reported_with_context() {
        let (ds, spec) = tiny();
        let mut init = NetworkParams::init(&spec, 3).unwrap();
        init.get_mut("head.bias").unwrap().data_mut()[0] = f64::INFINITY;
        let err = train_stage1(init, Stage1Method::Ce, &ds, None, &short(), 1).unwrap_err();
        assert!(err.is_numeric());
        assert!(err.to_string().contains("epoch 0"), "{err}");
    }
}
