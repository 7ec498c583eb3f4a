//! Confusion matrix, mean class recall over frequency groups, and
//! mean ± std across seeds.
//!
//! cargo run --example metrics

use tailforge::metrics::{aggregate_runs, confusion, make_groups, EvalReport, GroupSpec};
use tailforge::rebalance::ClassCounts;

fn main() -> tailforge::Result<()> {
    let train_counts = ClassCounts::new(vec![900, 400, 150, 60, 20, 8])?;
    let groups = make_groups(&train_counts, GroupSpec::for_classes(6))?;
    println!(
        "majority {:?}  minority {:?}",
        groups.majority, groups.minority
    );

    let labels = [0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5];
    let runs = [
        [0, 0, 1, 1, 2, 2, 3, 0, 4, 0, 0, 0],
        [0, 0, 1, 1, 2, 1, 3, 3, 0, 0, 5, 0],
        [0, 0, 1, 0, 2, 2, 3, 3, 4, 4, 5, 0],
    ];
    let cm = confusion(&runs[0], &labels, 6)?;
    println!("confusion (rows = truth):");
    for row in cm.to_rows() {
        println!("  {row:?}");
    }

    let reports = runs
        .iter()
        .enumerate()
        .map(|(seed, p)| EvalReport::evaluate(p, &labels, &groups, seed as u64))
        .collect::<tailforge::Result<Vec<_>>>()?;
    for r in &reports {
        println!(
            "seed {}: all {:.2} major {:.2} minor {:.2}",
            r.seed, r.mcr_all, r.mcr_major, r.mcr_minor
        );
    }
    let agg = aggregate_runs(&reports)?;
    println!(
        "over {} seeds: all {:.2} ± {:.2}, minor {:.2} ± {:.2}",
        agg.runs, agg.mcr_all.mean, agg.mcr_all.std, agg.mcr_minor.mean, agg.mcr_minor.std
    );
    Ok(())
}
