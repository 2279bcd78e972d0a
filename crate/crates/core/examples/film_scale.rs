//! How far a FiLM scale can pull a posterior back towards the prior: the
//! closed-form optimum against a grid search.

use gvcl::gaussian::{film_optimal_scale, film_scaled_kl, film_scaled_kl_curvature};
use gvcl::toys::{film_scale_grid, grid_argmin, random_film_instance};

fn main() -> gvcl::Result<()> {
    for seed in 0..5 {
        let (q, prior) = random_film_instance(seed, 8)?;
        let c = film_optimal_scale(&q, &prior)?;
        let grid = film_scale_grid(&q, &prior, 0.01, 3.0 * c)?;
        let best = grid_argmin(&grid).expect("nonempty grid");
        println!(
            "instance {seed}: c* = {c:.4} (grid {best:.2}), KL {:.3} -> {:.3}, curvature {:.2}, FiLM scale {:.4}",
            film_scaled_kl(&q, &prior, 1.0)?,
            film_scaled_kl(&q, &prior, c)?,
            film_scaled_kl_curvature(&q, &prior, c)?,
            1.0 / c
        );
    }
    Ok(())
}
