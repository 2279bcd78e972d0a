//! β-VI on a one-dimensional Gaussian mean: the fitted precision lands on
//! `N/(βσ²) + 1/σ₀²`, so smaller β means a sharper posterior.

use gvcl::objectives::conjugate_beta_vi;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn main() -> gvcl::Result<()> {
    let noise_var: f64 = 0.5;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let normal = Normal::new(1.5, noise_var.sqrt()).expect("valid normal");
    let ys: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng)).collect();

    println!("{:>6} {:>12} {:>12} {:>10}", "beta", "precision", "closed form", "mean");
    for beta in [0.05, 0.2, 1.0, 5.0] {
        let q = conjugate_beta_vi(&ys, noise_var, 1.0, beta, 20_000)?;
        let closed = ys.len() as f64 / (beta * noise_var) + 1.0;
        println!("{beta:>6} {:>12.3} {closed:>12.3} {:>10.4}", 1.0 / q.var()[0], q.mu()[0]);
    }
    Ok(())
}
