//! Classification and metric-learning losses, all built from graph
//! primitives so they differentiate end to end.
//!
//! Classification losses take logits (B×K) and integer labels. Metric
//! losses take raw features `r` (center, triplet) or unit-norm projections
//! `z` (supervised contrastive).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rebalance::{effective_number_weights, ClassCounts};

pub mod check;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Center,
    Triplet,
    Supcon,
}

impl MetricKind {
    /// Default coefficient: 0.001 for the Euclidean losses, 1.0 for supcon.
    pub fn default_lambda(self) -> f64 {
        match self {
            MetricKind::Center | MetricKind::Triplet => 0.001,
            MetricKind::Supcon => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricLossConfig {
    pub kind: MetricKind,
    pub lambda: f64,
    #[serde(default)]
    pub triplet: TripletConfig,
    #[serde(default)]
    pub supcon: SupConConfig,
}

impl MetricLossConfig {
    pub fn new(kind: MetricKind) -> Self {
        Self {
            kind,
            lambda: kind.default_lambda(),
            triplet: TripletConfig::default(),
            supcon: SupConConfig::default(),
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!(
                "metric lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        self.triplet.validate()?;
        self.supcon.validate()
    }
}

/// Learnable class centers, K×feature_dim, starting at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterState {
    pub centers: Tensor,
}

impl CenterState {
    pub fn new(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            centers: Tensor::zeros(&[num_classes, feature_dim]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    BatchHard,
    AllValid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletConfig {
    pub margin: f64,
    pub mining: Mining,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 50.0,
            mining: Mining::BatchHard,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::invalid(format!(
                "triplet margin must be > 0, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupConConfig {
    pub temperature: f64,
}

impl Default for SupConConfig {
    fn default() -> Self {
        Self { temperature: 0.05 }
    }
}

impl SupConConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "supcon temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalConfig {
    pub gamma: f64,
    pub class_balanced: bool,
    pub beta: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            class_balanced: false,
            beta: 0.9999,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid(format!(
                "focal gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::invalid(format!(
                "focal beta must be in [0, 1), got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdamConfig {
    pub max_margin: f64,
    pub scale: f64,
    pub drw: bool,
}

impl Default for LdamConfig {
    fn default() -> Self {
        Self {
            max_margin: 0.5,
            scale: 30.0,
            drw: false,
        }
    }
}

impl LdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_margin > 0.0) || !(self.scale > 0.0) {
            return Err(Error::invalid("ldam max_margin and scale must be > 0"));
        }
        Ok(())
    }
}

/// Output of a metric loss that may find nothing to average.
#[derive(Clone, Copy, Debug)]
pub struct MetricOutput {
    pub loss: Var,
    /// Number of averaged terms (anchors or triples). Zero means the batch
    /// was degenerate and `loss` is the constant 0.
    pub terms: usize,
}

impl MetricOutput {
    pub fn is_degenerate(&self) -> bool {
        self.terms == 0
    }
}

fn check_labels(labels: &[usize], rows: usize, num_classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "labels",
            lhs: vec![rows],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

fn logits_dims(g: &Graph, logits: Var) -> Result<(usize, usize)> {
    g.value(logits).dims2().ok_or_else(|| Error::ShapeMismatch {
        op: "logits",
        lhs: g.shape(logits).to_vec(),
        rhs: vec![],
    })
}

pub(crate) fn one_hot(labels: &[usize], num_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), num_classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * num_classes + y] = 1.0;
    }
    t
}

/// log p(y_i | x_i) per row, as a length-B vector.
fn true_class_log_prob(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, k) = logits_dims(g, logits)?;
    check_labels(labels, rows, k)?;
    let logp = g.log_softmax(logits)?;
    let mask = g.constant(one_hot(labels, k));
    let picked = g.mul(logp, mask)?;
    g.sum_rows(picked)
}

fn per_sample_weights(labels: &[usize], class_weights: &[f64], k: usize) -> Result<Tensor> {
    if class_weights.len() != k {
        return Err(Error::ShapeMismatch {
            op: "class_weights",
            lhs: vec![k],
            rhs: vec![class_weights.len()],
        });
    }
    Tensor::new(
        vec![labels.len()],
        labels.iter().map(|&y| class_weights[y]).collect(),
    )
}

/// Weighted mean of −log softmax at the true class:
/// `Σ wᵢ·ℓᵢ / Σ wᵢ` with `wᵢ = class_weights[yᵢ]` (all ones when `None`).
pub fn cross_entropy(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    let (_, k) = logits_dims(g, logits)?;
    let lp = true_class_log_prob(g, logits, labels)?;
    match class_weights {
        None => {
            // Same reduction as the weighted path, so all-ones weights agree
            // with `None` bit for bit.
            let s = g.sum(lp);
            Ok(g.scale(s, -1.0 / labels.len() as f64))
        }
        Some(w) => {
            let wt = per_sample_weights(labels, w, k)?;
            let total: f64 = wt.data().iter().sum();
            if !(total > 0.0) {
                return Err(Error::invalid(
                    "cross_entropy: class weights of the batch sum to zero",
                ));
            }
            let wv = g.constant(wt);
            let weighted = g.mul(lp, wv)?;
            let s = g.sum(weighted);
            Ok(g.scale(s, -1.0 / total))
        }
    }
}

/// `(1/2B) Σᵢ ‖rᵢ − c_{yᵢ}‖²`; gradients reach both `r` and `centers`.
pub fn center_loss(g: &mut Graph, r: Var, labels: &[usize], centers: Var) -> Result<Var> {
    let (rows, d) = g.value(r).dims2().ok_or_else(|| Error::ShapeMismatch {
        op: "center_loss",
        lhs: g.shape(r).to_vec(),
        rhs: g.shape(centers).to_vec(),
    })?;
    let (k, dc) = g.value(centers).dims2().unwrap_or((0, usize::MAX));
    if d != dc {
        return Err(Error::ShapeMismatch {
            op: "center_loss",
            lhs: g.shape(r).to_vec(),
            rhs: g.shape(centers).to_vec(),
        });
    }
    check_labels(labels, rows, k)?;
    let c = g.gather_rows(centers, labels)?;
    let diff = g.sub(r, c)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 0.5 / rows.max(1) as f64))
}

/// Squared-distance triplet hinge with the configured mining.
///
/// `batch_hard` takes, per anchor, the farthest positive and the nearest
/// negative and averages over anchors having both. `all_valid` averages
/// over every (anchor, positive, negative) triple. Ties pick the lowest
/// index.
pub fn triplet_loss(
    g: &mut Graph,
    r: Var,
    labels: &[usize],
    cfg: &TripletConfig,
) -> Result<MetricOutput> {
    cfg.validate()?;
    let (b, _) = g.value(r).dims2().ok_or_else(|| Error::ShapeMismatch {
        op: "triplet_loss",
        lhs: g.shape(r).to_vec(),
        rhs: vec![],
    })?;
    check_labels(labels, b, usize::MAX)?;
    let dist = g.pairwise_sq_dist(r, r)?;
    let d = g.value(dist).data().to_vec();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    match cfg.mining {
        Mining::BatchHard => {
            for a in 0..b {
                let mut hardest_p: Option<usize> = None;
                let mut hardest_n: Option<usize> = None;
                for j in 0..b {
                    if j == a {
                        continue;
                    }
                    if labels[j] == labels[a] {
                        if hardest_p.is_none_or(|p| d[a * b + j] > d[a * b + p]) {
                            hardest_p = Some(j);
                        }
                    } else if hardest_n.is_none_or(|n| d[a * b + j] < d[a * b + n]) {
                        hardest_n = Some(j);
                    }
                }
                if let (Some(p), Some(n)) = (hardest_p, hardest_n) {
                    pos.push(a * b + p);
                    neg.push(a * b + n);
                }
            }
        }
        Mining::AllValid => {
            for a in 0..b {
                for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
                    for n in (0..b).filter(|&n| labels[n] != labels[a]) {
                        pos.push(a * b + p);
                        neg.push(a * b + n);
                    }
                }
            }
        }
    }
    if pos.is_empty() {
        return Ok(MetricOutput {
            loss: g.constant(Tensor::scalar(0.0)),
            terms: 0,
        });
    }
    let flat = g.reshape(dist, &[b * b])?;
    let dp = g.gather_rows(flat, &pos)?;
    let dn = g.gather_rows(flat, &neg)?;
    let gap = g.sub(dp, dn)?;
    let shifted = g.add_scalar(gap, cfg.margin);
    let hinge = g.relu(shifted);
    Ok(MetricOutput {
        loss: g.mean(hinge),
        terms: pos.len(),
    })
}

/// Supervised contrastive loss on unit-norm rows `z`.
///
/// For each anchor i with at least one same-label partner,
/// `−(1/|P(i)|) Σ_{p∈P(i)} log(exp(zᵢ·z_p/τ) / Σ_{a≠i} exp(zᵢ·z_a/τ))`,
/// averaged over such anchors.
pub fn supcon_loss(
    g: &mut Graph,
    z: Var,
    labels: &[usize],
    cfg: &SupConConfig,
) -> Result<MetricOutput> {
    cfg.validate()?;
    let (b, _) = g.value(z).dims2().ok_or_else(|| Error::ShapeMismatch {
        op: "supcon_loss",
        lhs: g.shape(z).to_vec(),
        rhs: vec![],
    })?;
    check_labels(labels, b, usize::MAX)?;
    for i in 0..b {
        let norm = g.value(z).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "supcon_loss: row {i} has norm {norm}, expected 1"
            )));
        }
    }
    let mut weights = Tensor::zeros(&[b, b]);
    let mut anchors = 0;
    for i in 0..b {
        let positives = (0..b).filter(|&p| p != i && labels[p] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        anchors += 1;
        for p in (0..b).filter(|&p| p != i && labels[p] == labels[i]) {
            weights.data_mut()[i * b + p] = 1.0 / positives as f64;
        }
    }
    if anchors == 0 {
        return Ok(MetricOutput {
            loss: g.constant(Tensor::scalar(0.0)),
            terms: 0,
        });
    }
    // Self-similarity is pushed to −1e30 so it drops out of the softmax
    // denominator without producing infinities.
    let mut self_mask = Tensor::zeros(&[b, b]);
    for i in 0..b {
        self_mask.data_mut()[i * b + i] = -1e30;
    }
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let sim = g.scale(sim, 1.0 / cfg.temperature);
    let mask = g.constant(self_mask);
    let masked = g.add(sim, mask)?;
    let logp = g.log_softmax(masked)?;
    let w = g.constant(weights);
    let picked = g.mul(logp, w)?;
    let total = g.sum(picked);
    Ok(MetricOutput {
        loss: g.scale(total, -1.0 / anchors as f64),
        terms: anchors,
    })
}

/// Mean of `−w_y (1 − p_t)^γ log p_t`. With `class_balanced`, `w_y` is the
/// effective-number weight of the true class; otherwise 1.
pub fn focal_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    cfg: &FocalConfig,
    class_counts: Option<&ClassCounts>,
) -> Result<Var> {
    cfg.validate()?;
    let (rows, k) = logits_dims(g, logits)?;
    let lp = true_class_log_prob(g, logits, labels)?;
    let mut term = lp;
    if cfg.gamma != 0.0 {
        // 1 − p_t as the mass on the other classes; subtracting from 1
        // cancels catastrophically for confident samples.
        let p = g.softmax(logits)?;
        let mut mask = one_hot(labels, k);
        mask.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
        let others = g.constant(mask);
        let off = g.mul(p, others)?;
        let one_minus = g.sum_rows(off)?;
        let modulator = g.powf(one_minus, cfg.gamma);
        term = g.mul(modulator, lp)?;
    }
    if cfg.class_balanced {
        let counts = class_counts
            .ok_or_else(|| Error::invalid("class-balanced focal loss needs class counts"))?;
        let w = effective_number_weights(counts, cfg.beta)?;
        let wv = g.constant(per_sample_weights(labels, w.as_slice(), k)?);
        term = g.mul(term, wv)?;
    }
    let s = g.sum(term);
    Ok(g.scale(s, -1.0 / rows.max(1) as f64))
}

/// Per-class LDAM margins `Δ_c = C·n_c^(−1/4)`, scaled so the largest is
/// `max_margin`.
pub fn ldam_margins(counts: &ClassCounts, max_margin: f64) -> Vec<f64> {
    let raw: Vec<f64> = counts
        .as_slice()
        .iter()
        .map(|&n| (n as f64).powf(-0.25))
        .collect();
    let largest = raw.iter().copied().fold(0.0, f64::max);
    raw.iter().map(|r| r * max_margin / largest).collect()
}

/// Cross-entropy on `s·(logits − Δ_y one-hot)`, optionally class-weighted
/// (the weighted form is what a deferred re-weighting schedule switches to).
pub fn ldam_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    class_counts: &ClassCounts,
    cfg: &LdamConfig,
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    cfg.validate()?;
    let (rows, k) = logits_dims(g, logits)?;
    if class_counts.num_classes() != k {
        return Err(Error::ShapeMismatch {
            op: "ldam_loss",
            lhs: vec![k],
            rhs: vec![class_counts.num_classes()],
        });
    }
    check_labels(labels, rows, k)?;
    let margins = ldam_margins(class_counts, cfg.max_margin);
    let mut offset = Tensor::zeros(&[rows, k]);
    for (i, &y) in labels.iter().enumerate() {
        offset.data_mut()[i * k + y] = margins[y];
    }
    let off = g.constant(offset);
    let shifted = g.sub(logits, off)?;
    let scaled = g.scale(shifted, cfg.scale);
    cross_entropy(g, scaled, labels, class_weights)
}

/// Graph inputs a metric loss may need.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricInputs {
    /// Raw extractor features, for center and triplet losses.
    pub features: Option<Var>,
    /// Unit-norm projections, for supcon.
    pub projections: Option<Var>,
    /// Class centers, for center loss.
    pub centers: Option<Var>,
}

/// Unweighted metric loss `L_M` of the configured kind.
pub fn metric_loss(
    g: &mut Graph,
    inputs: &MetricInputs,
    labels: &[usize],
    cfg: &MetricLossConfig,
) -> Result<MetricOutput> {
    let missing = |what: &str| Error::invalid(format!("{:?} loss needs {what}", cfg.kind));
    match cfg.kind {
        MetricKind::Center => {
            let r = inputs.features.ok_or_else(|| missing("features"))?;
            let c = inputs.centers.ok_or_else(|| missing("centers"))?;
            Ok(MetricOutput {
                loss: center_loss(g, r, labels, c)?,
                terms: labels.len(),
            })
        }
        MetricKind::Triplet => {
            let r = inputs.features.ok_or_else(|| missing("features"))?;
            triplet_loss(g, r, labels, &cfg.triplet)
        }
        MetricKind::Supcon => {
            let z = inputs.projections.ok_or_else(|| missing("projections"))?;
            supcon_loss(g, z, labels, &cfg.supcon)
        }
    }
}

/// First-stage objective `L_CE + λ·L_M`.
pub fn composite_stage1_loss(
    g: &mut Graph,
    logits: Var,
    inputs: &MetricInputs,
    labels: &[usize],
    cfg: &MetricLossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let ce = cross_entropy(g, logits, labels, None)?;
    let m = metric_loss(g, inputs, labels, cfg)?;
    let scaled = g.scale(m.loss, cfg.lambda);
    g.add(ce, scaled)
}
