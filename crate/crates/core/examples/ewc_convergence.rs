//! As β shrinks, the tempered variational solution on a 2-D logistic task
//! pair approaches the Online EWC solution.

use gvcl::toys::{ewc_convergence, mean_distances, CONVERGENCE_BETAS};

fn main() {
    let rows = ewc_convergence(&[0, 1, 2], &CONVERGENCE_BETAS);
    if let Some(r) = rows.iter().find(|r| r.error.is_some()) {
        eprintln!("seed {} beta {}: {:?}", r.seed, r.beta, r.error);
        return;
    }
    for (beta, d) in CONVERGENCE_BETAS.iter().zip(mean_distances(&rows, &CONVERGENCE_BETAS)) {
        println!("beta {beta:>5}: mean distance to EWC {d:.4}");
    }
}
