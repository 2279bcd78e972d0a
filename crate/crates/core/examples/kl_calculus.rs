//! The KL variants used by the continual objectives, on a small example.

use gvcl::gaussian::{kl_diag, kl_lambda, kl_lambda_tilde, temper};
use gvcl::{ClippedPrecisionPrior, DiagGaussian};

fn main() -> gvcl::Result<()> {
    let q = DiagGaussian::new(vec![0.8, -0.2, 0.0], vec![0.05, 0.5, 0.9])?;
    let posterior = DiagGaussian::new(vec![1.0, 0.0, 0.1], vec![0.01, 0.4, 1.5])?;
    let prior0_var = vec![1.0; 3];

    println!("KL(q || p)               = {:.6}", kl_diag(&q, &posterior)?);
    for lambda in [1.0, 10.0, 100.0] {
        let tempered = kl_diag(&temper(&q, lambda)?, &temper(&posterior, lambda)?)?;
        println!(
            "lambda {lambda:>5}: tempered KL = {tempered:.6}, mean-scaled KL = {:.6}",
            kl_lambda(&q, &posterior, lambda)?
        );
    }

    for lambda in [1.0, 10.0, 100.0] {
        let prior = ClippedPrecisionPrior::new(posterior.clone(), prior0_var.clone(), lambda)?;
        println!(
            "lambda {lambda:>5}: clipped precision {:?}, KL = {:.4}",
            prior.precision().iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>(),
            kl_lambda_tilde(&q, &prior)?
        );
    }
    Ok(())
}
