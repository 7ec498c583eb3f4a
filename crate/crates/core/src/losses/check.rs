//! Gradient checks of every loss on random instances.
//!
//! Each named loss is wrapped as a scalar function of one input tensor and
//! compared against central differences. Instances whose hinge losses sit
//! within `KINK_GAP` of a non-differentiable point are redrawn, since a
//! finite difference across a kink measures nothing useful.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    center_loss, composite_stage1_loss, cross_entropy, focal_loss, ldam_loss, supcon_loss,
    triplet_loss, FocalConfig, LdamConfig, MetricInputs, MetricKind, MetricLossConfig, Mining,
    SupConConfig, TripletConfig,
};
use crate::autodiff::{grad_check, Graph, Tensor, Var, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::rebalance::ClassCounts;

/// Names accepted by [`check_loss`].
pub const LOSS_NAMES: [&str; 10] = [
    "ce",
    "weighted_ce",
    "focal",
    "cb_focal",
    "ldam",
    "center",
    "triplet_all_valid",
    "triplet_batch_hard",
    "supcon",
    "composite",
];

/// Errors below this count as passing.
pub const TOLERANCE: f64 = 1e-4;

const KINK_GAP: f64 = 1e-3;

/// Largest relative gradient error of loss `name` over `trials` random
/// instances drawn from `seed`.
pub fn check_loss(name: &str, trials: usize, seed: u64) -> Result<f64> {
    let which = LOSS_NAMES.iter().position(|n| *n == name).ok_or_else(|| {
        Error::invalid(format!(
            "unknown loss `{name}`; valid names: {}",
            LOSS_NAMES.join(", ")
        ))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    let mut worst = 0.0f64;
    for t in 0..trials {
        worst = worst.max(one_trial(name, t, &mut rng)?);
    }
    Ok(worst)
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("length matches shape")
}

/// `b` labels over `k` classes with every class present at least twice.
fn labels(b: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut y: Vec<usize> = (0..b).map(|i| i % k).collect();
    y.shuffle(rng);
    y
}

fn counts(k: usize, rng: &mut ChaCha8Rng) -> ClassCounts {
    ClassCounts::new((0..k).map(|_| rng.random_range(50..2000)).collect()).expect("positive counts")
}

fn sq_dists(x: &Tensor) -> Vec<Vec<f64>> {
    let (b, d) = x.dims2().expect("matrix");
    let mut out = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in 0..b {
            out[i][j] = (0..d).map(|c| (x.get2(i, c) - x.get2(j, c)).powi(2)).sum();
        }
    }
    out
}

/// True when some triplet hinge, or a batch-hard arg-max/arg-min, is within
/// `KINK_GAP` of switching.
fn near_triplet_kink(x: &Tensor, y: &[usize], cfg: &TripletConfig) -> bool {
    let d = sq_dists(x);
    let b = y.len();
    for a in 0..b {
        let pos: Vec<f64> = (0..b)
            .filter(|&p| p != a && y[p] == y[a])
            .map(|p| d[a][p])
            .collect();
        let neg: Vec<f64> = (0..b).filter(|&n| y[n] != y[a]).map(|n| d[a][n]).collect();
        match cfg.mining {
            Mining::AllValid => {
                for dp in &pos {
                    if neg.iter().any(|dn| (dp - dn + cfg.margin).abs() < KINK_GAP) {
                        return true;
                    }
                }
            }
            Mining::BatchHard => {
                let gap = |v: &[f64], largest: bool| {
                    let mut s = v.to_vec();
                    s.sort_by(f64::total_cmp);
                    if largest {
                        s.reverse();
                    }
                    (s.len() > 1 && (s[0] - s[1]).abs() < KINK_GAP, s[0])
                };
                let (p_tie, hardest_p) = gap(&pos, true);
                let (n_tie, hardest_n) = gap(&neg, false);
                if p_tie || n_tie || (hardest_p - hardest_n + cfg.margin).abs() < KINK_GAP {
                    return true;
                }
            }
        }
    }
    false
}

fn one_trial(name: &str, trial: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let eps = DEFAULT_EPSILON;
    let k = rng.random_range(3..=4);
    let b = 2 * k + rng.random_range(0..=3);
    let y = labels(b, k, rng);
    match name {
        "ce" => {
            let x = random(&[b, k], 3.0, rng);
            grad_check(
                |g: &mut Graph, v: Var| cross_entropy(g, v, &y, None),
                &x,
                eps,
            )
        }
        "weighted_ce" => {
            let x = random(&[b, k], 3.0, rng);
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..3.0)).collect();
            grad_check(
                |g: &mut Graph, v: Var| cross_entropy(g, v, &y, Some(&w)),
                &x,
                eps,
            )
        }
        "focal" | "cb_focal" => {
            // (1 − p_t)^γ makes gradients of confident rows tiny; keep the
            // logits moderate so they stay above the roundoff floor.
            let x = random(&[b, k], 1.5, rng);
            let cfg = FocalConfig {
                class_balanced: name == "cb_focal",
                ..FocalConfig::default()
            };
            let n = counts(k, rng);
            grad_check(
                |g: &mut Graph, v: Var| focal_loss(g, v, &y, &cfg, Some(&n)),
                &x,
                eps,
            )
        }
        "ldam" => {
            // s = 30 multiplies the logits; larger inputs push some softmax
            // entries to ~1e-8, where the finite difference is pure roundoff.
            let x = random(&[b, k], 0.05, rng);
            let n = counts(k, rng);
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..3.0)).collect();
            let weights = (trial % 2 == 1).then_some(w.as_slice());
            grad_check(
                |g: &mut Graph, v: Var| ldam_loss(g, v, &y, &n, &LdamConfig::default(), weights),
                &x,
                eps,
            )
        }
        "center" => {
            let d = rng.random_range(2..=5);
            let r = random(&[b, d], 2.0, rng);
            let c = random(&[k, d], 2.0, rng);
            // Alternate between differentiating the features and the centers.
            if trial.is_multiple_of(2) {
                grad_check(
                    |g: &mut Graph, v: Var| {
                        let cv = g.constant(c.clone());
                        center_loss(g, v, &y, cv)
                    },
                    &r,
                    eps,
                )
            } else {
                grad_check(
                    |g: &mut Graph, v: Var| {
                        let rv = g.constant(r.clone());
                        center_loss(g, rv, &y, v)
                    },
                    &c,
                    eps,
                )
            }
        }
        "triplet_all_valid" | "triplet_batch_hard" => {
            let cfg = TripletConfig {
                margin: 1.0,
                mining: if name == "triplet_all_valid" {
                    Mining::AllValid
                } else {
                    Mining::BatchHard
                },
            };
            let d = rng.random_range(2..=5);
            let r = loop {
                let r = random(&[b, d], 1.0, rng);
                if !near_triplet_kink(&r, &y, &cfg) {
                    break r;
                }
            };
            grad_check(
                |g: &mut Graph, v: Var| Ok(triplet_loss(g, v, &y, &cfg)?.loss),
                &r,
                eps,
            )
        }
        "supcon" => {
            let p = rng.random_range(2..=6);
            let x = random(&[b, p], 1.0, rng);
            let cfg = SupConConfig {
                temperature: rng.random_range(0.05..0.5),
            };
            grad_check(
                |g: &mut Graph, v: Var| {
                    let z = g.l2_normalize(v)?;
                    Ok(supcon_loss(g, z, &y, &cfg)?.loss)
                },
                &x,
                eps,
            )
        }
        "composite" => composite_trial(trial, b, k, &y, rng),
        _ => Err(Error::invalid(format!("unknown loss `{name}`"))),
    }
}

/// `CE(r·W) + λ·L_M` as a function of the features `r`, rotating through
/// the three metric kinds.
fn composite_trial(
    trial: usize,
    b: usize,
    k: usize,
    y: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let d = rng.random_range(3..=5);
    let kind = [MetricKind::Center, MetricKind::Triplet, MetricKind::Supcon][trial % 3];
    let cfg = MetricLossConfig {
        kind,
        lambda: rng.random_range(0.1..1.0),
        triplet: TripletConfig {
            margin: 1.0,
            mining: Mining::BatchHard,
        },
        supcon: SupConConfig { temperature: 0.2 },
    };
    let w = random(&[d, k], 1.0, rng);
    let proj = random(&[d, 3], 1.0, rng);
    let centers = random(&[k, d], 1.0, rng);
    let r = loop {
        let r = random(&[b, d], 1.0, rng);
        if kind != MetricKind::Triplet || !near_triplet_kink(&r, y, &cfg.triplet) {
            break r;
        }
    };
    grad_check(
        |g: &mut Graph, v: Var| {
            let wv = g.constant(w.clone());
            let logits = g.matmul(v, wv)?;
            let pv = g.constant(proj.clone());
            let projected = g.matmul(v, pv)?;
            let z = g.l2_normalize(projected)?;
            let c = g.constant(centers.clone());
            let inputs = MetricInputs {
                features: Some(v),
                projections: Some(z),
                centers: Some(c),
            };
            composite_stage1_loss(g, logits, &inputs, y, &cfg)
        },
        &r,
        DEFAULT_EPSILON,
    )
}
