//! The property checks behind `gvcl verify`, plus one run with a KL that
//! is off by a constant to show the suite noticing.

use gvcl::verify::{render_table, run_suite, suite, tempering_identity};
use gvcl::DiagGaussian;

fn off_by_a_little(q: &DiagGaussian, p: &DiagGaussian) -> gvcl::Result<f64> {
    Ok(gvcl::gaussian::kl_diag(q, p)? + 1e-9)
}

fn main() {
    print!("{}", render_table(&run_suite(&suite())));
    match tempering_identity(off_by_a_little, 100) {
        Ok(_) => println!("perturbed KL slipped through"),
        Err(e) => println!("perturbed KL rejected: {e}"),
    }
}
