//! Model, objective, runner and data invariants, shared with `gvcl verify`.

use gvcl::verify;

macro_rules! checks {
    ($($name:ident => $call:expr;)*) => {
        $(
            #[test]
            fn $name() {
                if let Err(e) = $call {
                    panic!("{e}");
                }
            }
        )*
    };
}

checks! {
    film_identity => verify::film_identity();
    task_isolation => verify::task_isolation();
    sampled_likelihood_gradient => verify::sampled_likelihood_gradient();
    kl_additivity => verify::kl_additivity();
    vcl_elbo_reduction => verify::vcl_elbo_reduction();
    kl_ignores_film => verify::kl_ignores_film();
    ewc_constant_shift => verify::ewc_constant_shift();
    vcl_equals_unit_gvcl => verify::vcl_equals_unit_gvcl();
    prior_chain => verify::prior_chain();
    run_determinism => verify::run_determinism();
    film_freshness => verify::film_freshness();
    idx_rejects_inconsistent => verify::idx_rejects_inconsistent();
    generators_pure => verify::generators_pure();
    config_round_trip => verify::config_round_trip();
    output_layout => verify::output_layout();
    clipped_prior_reductions => verify::clipped_prior_reductions(gvcl::gaussian::kl_diag, 500);
}

