//! Build a small graph by hand, backpropagate, and verify every loss
//! against central differences.
//!
//! cargo run --example autodiff_gradcheck

use tailforge::autodiff::{grad_check, Graph, Tensor, DEFAULT_EPSILON};
use tailforge::losses::check::{check_loss, LOSS_NAMES, TOLERANCE};

fn main() -> tailforge::Result<()> {
    // y = Σ relu(x·W)
    let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]])?;
    let w = Tensor::from_rows(&[vec![0.3, -0.7, 1.1], vec![0.9, 0.2, -0.4]])?;

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let wv = g.constant(w.clone());
    let h = g.matmul(xv, wv)?;
    let h = g.relu(h);
    let y = g.sum(h);
    g.backward(y)?;
    println!("y = {:.4}", g.scalar(y));
    println!("dy/dx = {:?}", g.grad(xv));

    let err = grad_check(
        |g, v| {
            let wv = g.constant(w.clone());
            let h = g.matmul(v, wv)?;
            let h = g.relu(h);
            Ok(g.sum(h))
        },
        &x,
        DEFAULT_EPSILON,
    )?;
    println!("hand graph max relative error: {err:.2e}\n");

    println!("{:<20} max relative error over 20 random instances", "loss");
    for name in LOSS_NAMES {
        let err = check_loss(name, 20, 0)?;
        let mark = if err < TOLERANCE { "ok" } else { "FAIL" };
        println!("{name:<20} {err:.2e}  {mark}");
    }
    Ok(())
}
