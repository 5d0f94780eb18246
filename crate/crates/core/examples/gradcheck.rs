//! Finite-difference check of the full loss gradient, plus Γ on a hand-fed score table.
//!
//! `cargo run --release --example gradcheck`

use cycle_align::cycle::{hard_max, soft_max};
use cycle_align::train::gradient_check;

fn main() -> cycle_align::Result<()> {
    for seed in 0..3 {
        let r = gradient_check(seed, 200)?;
        println!(
            "seed {seed}: max relative error {:.2e} over {} coordinates (worst {}: analytic {:.6e}, numeric {:.6e})",
            r.max_rel_error, r.coords_checked, r.worst_coord, r.worst_analytic, r.worst_numeric
        );
    }
    let scores = [1.2, 0.4, -0.3, 1.9];
    println!("scores {scores:?}: soft max {:.4}, hard max {:?}", soft_max(&scores)?, hard_max(&scores));
    Ok(())
}
