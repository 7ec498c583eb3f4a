//! Class weights, deferred re-weighting, balanced sampling and mixup.
//!
//! cargo run --example rebalancing

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tailforge::autodiff::Tensor;
use tailforge::rebalance::{
    class_balanced_sampler, effective_number_weights, inverse_frequency_weights, mixup_batch,
    ClassCounts, DrwSchedule,
};

fn main() -> tailforge::Result<()> {
    let counts = ClassCounts::new(vec![1000, 316, 100, 32, 10])?;
    println!("counts               {:?}", counts.as_slice());
    println!(
        "inverse frequency    {:.3?}",
        inverse_frequency_weights(&counts).as_slice()
    );
    let eff = effective_number_weights(&counts, 0.999)?;
    println!("effective (β=0.999)  {:.3?}", eff.as_slice());

    // Uniform weights until 80% of training, then the target weights.
    let drw = DrwSchedule::deferred(10, eff);
    for epoch in [0, 7, 8, 9] {
        println!(
            "drw epoch {epoch}: {:.3?}",
            drw.weights_at(epoch).as_slice()
        );
    }

    let mut sampler = class_balanced_sampler(&counts, 0);
    let mut seen = [0usize; 5];
    for _ in 0..10_000 {
        seen[sampler.draw().0] += 1;
    }
    println!("balanced sampler, 10000 draws per class: {seen:?}");

    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]])?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mixed = mixup_batch(&x, &[0, 1, 2], 1.0, &mut rng)?;
    println!(
        "mixup λ = {:.3}, partner labels {:?}",
        mixed.lambda, mixed.partner_labels
    );
    println!("mixed inputs {:?}", mixed.inputs.data());
    Ok(())
}
