//! Small β reads the likelihood's curvature near the mean, large β reads it
//! over a wider range. `f1` is flat near zero, `f2` has a cusp there, and
//! the linear model has one curvature everywhere.

use gvcl::objectives::CurvatureFn;
use gvcl::toys::{curvature_sweep, mean_effective_var, CURVATURE_BETAS};

fn main() {
    let rows = curvature_sweep(&CURVATURE_BETAS, &CurvatureFn::ALL, &[0, 1, 2]);
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("{} beta {} seed {}: {:?}", r.function, r.beta, r.seed, r.error);
    }
    print!("{:>8}", "fn");
    for b in CURVATURE_BETAS {
        print!(" {:>12}", format!("beta {b}"));
    }
    println!();
    for f in CurvatureFn::ALL {
        print!("{:>8}", f.name());
        for b in CURVATURE_BETAS {
            print!(" {:>12.4}", mean_effective_var(&rows, f, b).unwrap_or(f64::NAN));
        }
        println!();
    }
}
