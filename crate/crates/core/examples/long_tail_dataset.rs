//! Turn a balanced dataset into an exponentially long-tailed one, split it,
//! and write it to disk in both formats.
//!
//! cargo run --example long_tail_dataset

use tailforge::data::{
    compute_imbalance_ratio, long_tail_counts, make_long_tail, read_dataset, stratified_split,
    write_dataset, GaussianMixture, LongTailSpec,
};

fn main() -> tailforge::Result<()> {
    // Nine classes, 2000 samples each.
    let mixture = GaussianMixture::new(9, 12, 2.5, 42)?;
    let balanced = mixture.sample(&[2000; 9], 1)?;
    println!("balanced counts: {:?}", balanced.counts());

    // Exponential profile: n_c = round(n_max · ρ^(−c/(K−1))).
    println!(
        "profile for rho 100: {:?}",
        long_tail_counts(9, 2000, 100.0)?
    );

    let lt = make_long_tail(&balanced, &LongTailSpec::new(100.0, 2000, 7))?;
    let counts = lt.class_counts()?;
    println!("long-tailed counts: {:?}", counts.as_slice());
    println!("imbalance ratio: {:.2}", compute_imbalance_ratio(&counts));

    let (train, val, test) = stratified_split(&lt, [0.7, 0.1, 0.2], 3)?;
    println!(
        "train {:?}\nval   {:?}\ntest  {:?}",
        train.counts(),
        val.counts(),
        test.counts()
    );

    let dir = std::env::temp_dir().join("tailforge_long_tail_example");
    std::fs::create_dir_all(&dir).expect("temp dir is writable");
    let bin = dir.join("train.bin");
    let csv = dir.join("train.csv");
    write_dataset(&train, &bin)?;
    write_dataset(&train, &csv)?;
    assert_eq!(read_dataset(&bin)?.counts(), train.counts());
    println!("wrote {} and {}", bin.display(), csv.display());
    Ok(())
}
