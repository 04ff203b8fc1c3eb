//! Keep probabilities under a parameter budget: solve the shift, sample
//! relaxed gates, then pick the best feasible subset.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s3pet::gating::{expected_param_count, sample_binary_concrete, solve_zeta, shifted_sigmoid};
use s3pet::structure::select_structure;

fn main() -> s3pet::Result<()> {
    let alpha = [1.2, 0.4, -0.3, 0.9, -1.1, 0.0];
    let counts = [64, 10, 44, 32, 12, 10];
    let budget = 80;

    let zeta = solve_zeta(&alpha, 1.0, &counts, budget as f64)?;
    let p = shifted_sigmoid(&alpha, zeta, 1.0);
    println!("zeta {zeta:.6}, E[N] {:.6} for budget {budget}", expected_param_count(&p, &counts)?);
    for (i, pi) in p.iter().enumerate() {
        println!("  module {i}: {:>2} params, p = {pi:.3}", counts[i]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for beta in [1.0, 0.1] {
        let z: Vec<f64> = p
            .iter()
            .map(|&pi| sample_binary_concrete(pi, beta, s3pet::gating::open_uniform(&mut rng)))
            .collect();
        println!("gates at beta {beta}: {z:.3?}");
    }

    let sel = select_structure(&p, &counts, budget)?;
    println!(
        "selected {:?}: {} params, sum p = {:.3}, approximate: {}",
        sel.indices, sel.total_params, sel.value, sel.approximate
    );
    Ok(())
}
