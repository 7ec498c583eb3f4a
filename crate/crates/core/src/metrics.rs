//! Confusion matrices, mean class recall (MCR) and majority/minority groups.
//!
//! MCR values are percentages. Groups are ranked by training-set counts and
//! evaluated on whatever data produced the confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rebalance::ClassCounts;

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut counts = vec![0; num_classes * num_classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            for v in [p, y] {
                if v >= num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: v,
                        num_classes,
                    });
                }
            }
            counts[y * num_classes + p] += 1;
        }
        Ok(Self {
            k: num_classes,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.k..(truth + 1) * self.k]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    /// Recall in `[0, 1]`; fails for a class with no true samples.
    pub fn recall(&self, class: usize) -> Result<f64> {
        let n = self.row_sum(class);
        if n == 0 {
            return Err(Error::EmptyClass { class });
        }
        Ok(self.get(class, class) as f64 / n as f64)
    }

    pub fn to_rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }
}

pub fn confusion(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    ConfusionMatrix::new(predictions, labels, num_classes)
}

/// Mean recall over `group` (all classes when `None`), in percent.
pub fn mean_class_recall(cm: &ConfusionMatrix, group: Option<&[usize]>) -> Result<f64> {
    let all: Vec<usize>;
    let group = match group {
        Some(g) => g,
        None => {
            all = (0..cm.num_classes()).collect();
            &all
        }
    };
    if group.is_empty() {
        return Err(Error::invalid("mean class recall over an empty group"));
    }
    let mut sum = 0.0;
    for &c in group {
        if c >= cm.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: c,
                num_classes: cm.num_classes(),
            });
        }
        sum += cm.recall(c)?;
    }
    Ok(100.0 * sum / group.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub majority_size: usize,
    pub minority_size: usize,
}

impl GroupSpec {
    /// 3 majority / 3 minority classes, or 3 / 2 for seven classes. Fewer
    /// than six classes get `⌊K/2⌋` per group.
    pub fn for_classes(num_classes: usize) -> Self {
        let size = 3.min(num_classes / 2);
        Self {
            majority_size: size,
            minority_size: if num_classes == 7 { 2 } else { size },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Groups {
    pub majority: Vec<usize>,
    pub minority: Vec<usize>,
    /// Classes in neither group.
    pub medium: Vec<usize>,
}

/// Most and least frequent classes by training count. Ties rank the lower
/// class index as more frequent. Each group is returned in ascending order.
pub fn make_groups(train_counts: &ClassCounts, spec: GroupSpec) -> Result<Groups> {
    let k = train_counts.num_classes();
    if spec.majority_size == 0
        || spec.minority_size == 0
        || spec.majority_size + spec.minority_size > k
    {
        return Err(Error::invalid(format!(
            "groups of {} and {} do not fit disjointly in {k} classes",
            spec.majority_size, spec.minority_size
        )));
    }
    let counts = train_counts.as_slice();
    let mut ranked: Vec<usize> = (0..k).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Groups {
        majority: sorted(&ranked[..spec.majority_size]),
        minority: sorted(&ranked[k - spec.minority_size..]),
        medium: sorted(&ranked[spec.majority_size..k - spec.minority_size]),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    /// Per-class recall in `[0, 1]`.
    pub per_class_recall: Vec<f64>,
    pub mcr_all: f64,
    pub mcr_major: f64,
    pub mcr_minor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcr_medium: Option<f64>,
    pub groups: Groups,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix, groups: &Groups, seed: u64) -> Result<Self> {
        let per_class_recall = (0..cm.num_classes())
            .map(|c| cm.recall(c))
            .collect::<Result<Vec<_>>>()?;
        let mcr_medium = if groups.medium.is_empty() {
            None
        } else {
            Some(mean_class_recall(cm, Some(&groups.medium))?)
        };
        Ok(Self {
            seed,
            per_class_recall,
            mcr_all: mean_class_recall(cm, None)?,
            mcr_major: mean_class_recall(cm, Some(&groups.majority))?,
            mcr_minor: mean_class_recall(cm, Some(&groups.minority))?,
            mcr_medium,
            groups: groups.clone(),
        })
    }

    pub fn evaluate(
        predictions: &[usize],
        labels: &[usize],
        groups: &Groups,
        seed: u64,
    ) -> Result<Self> {
        let k = groups.majority.len() + groups.minority.len() + groups.medium.len();
        Self::from_confusion(&confusion(predictions, labels, k)?, groups, seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub mcr_all: MeanStd,
    pub mcr_major: MeanStd,
    pub mcr_minor: MeanStd,
    pub per_class_recall: Vec<MeanStd>,
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("no reports to aggregate"))?;
    if reports.iter().any(|r| {
        r.per_class_recall.len() != first.per_class_recall.len() || r.groups != first.groups
    }) {
        return Err(Error::invalid("reports differ in class count or groups"));
    }
    let of =
        |f: &dyn Fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        runs: reports.len(),
        mcr_all: of(&|r| r.mcr_all),
        mcr_major: of(&|r| r.mcr_major),
        mcr_minor: of(&|r| r.mcr_minor),
        per_class_recall: (0..first.per_class_recall.len())
            .map(|c| of(&|r| r.per_class_recall[c]))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(v: &[usize]) -> ClassCounts {
        ClassCounts::new(v.to_vec()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(cm.to_rows(), vec![vec![1, 1], vec![0, 1]]);
        assert_eq!(
            confusion(&[], &[], 3).unwrap().to_rows(),
            vec![vec![0; 3]; 3]
        );
        let labels = [2, 0, 1, 1, 2];
        let cm = confusion(&labels, &labels, 3).unwrap();
        assert_eq!(
            cm.to_rows(),
            vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]
        );
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[3], &[0], 2).is_err());
    }

    #[test]
    fn mcr_examples() {
        let labels = [0, 1, 1, 2];
        assert_eq!(
            mean_class_recall(&confusion(&labels, &labels, 3).unwrap(), None).unwrap(),
            100.0
        );
        let cm = confusion(&[0, 0, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(mean_class_recall(&cm, None).unwrap(), 100.0);
        let cm = confusion(&[0, 1, 0], &[0, 1, 1], 2).unwrap();
        assert_eq!(mean_class_recall(&cm, None).unwrap(), 75.0);
        // Duplicating class 1 leaves MCR unchanged.
        let cm2 = confusion(&[0, 1, 0, 1, 0], &[0, 1, 1, 1, 1], 2).unwrap();
        assert_eq!(mean_class_recall(&cm2, None).unwrap(), 75.0);
        let cm = confusion(&[0, 0], &[0, 0], 2).unwrap();
        assert!(matches!(
            mean_class_recall(&cm, None),
            Err(Error::EmptyClass { class: 1 })
        ));
        assert_eq!(mean_class_recall(&cm, Some(&[0])).unwrap(), 100.0);
    }

    #[test]
    fn group_examples() {
        let g = make_groups(
            &counts(&[5, 4, 3, 2, 1]),
            GroupSpec {
                majority_size: 2,
                minority_size: 2,
            },
        )
        .unwrap();
        assert_eq!(
            (g.majority, g.minority, g.medium),
            (vec![0, 1], vec![3, 4], vec![2])
        );
        let g = make_groups(&counts(&[9; 7]), GroupSpec::for_classes(7)).unwrap();
        assert_eq!((g.majority.len(), g.minority.len()), (3, 2));
        let g = make_groups(&counts(&[1; 9]), GroupSpec::for_classes(9)).unwrap();
        assert_eq!((g.majority, g.minority), (vec![0, 1, 2], vec![6, 7, 8]));
        let g = make_groups(&counts(&[50, 20, 9, 4, 1]), GroupSpec::for_classes(5)).unwrap();
        assert_eq!(
            (g.majority, g.minority, g.medium),
            (vec![0, 1], vec![3, 4], vec![2])
        );
        assert!(make_groups(
            &counts(&[1; 5]),
            GroupSpec {
                majority_size: 3,
                minority_size: 3,
            }
        )
        .is_err());
    }

    #[test]
    fn majority_predictor_scores_one_over_k() {
        let labels = [0, 0, 0, 1, 2, 3];
        let g = make_groups(
            &counts(&[10, 5, 2, 1]),
            GroupSpec {
                majority_size: 1,
                minority_size: 2,
            },
        )
        .unwrap();
        let r = EvalReport::evaluate(&[0; 6], &labels, &g, 0).unwrap();
        assert_eq!(r.mcr_all, 25.0);
        assert_eq!(r.mcr_major, 100.0);
        assert_eq!(r.mcr_minor, 0.0);
        assert_eq!(r.mcr_medium, Some(0.0));
    }

    #[test]
    fn aggregate_examples() {
        let g = make_groups(
            &counts(&[3, 2]),
            GroupSpec {
                majority_size: 1,
                minority_size: 1,
            },
        )
        .unwrap();
        let a = EvalReport::evaluate(&[0, 1, 1, 1, 0], &[0, 0, 1, 1, 1], &g, 1).unwrap();
        let agg = aggregate_runs(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(agg.mcr_all.std, 0.0);
        assert_eq!(agg.mcr_all.mean, a.mcr_all);
        assert_eq!(
            aggregate_runs(std::slice::from_ref(&a))
                .unwrap()
                .mcr_minor
                .std,
            0.0
        );
        assert_eq!(
            MeanStd::of(&[80.0, 90.0]),
            MeanStd {
                mean: 85.0,
                std: 5.0
            }
        );
        assert!(aggregate_runs(&[]).is_err());
    }
}
