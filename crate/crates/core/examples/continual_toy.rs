//! Driving a learner by hand through the two-task cluster toy and printing
//! the accuracy matrix for each method.

use gvcl::data::gen_toy_clusters;
use gvcl::metrics::{acc, bwt, ResultMatrix};
use gvcl::net::Architecture;
use gvcl::runner::{Learner, Method, TrainConfig};

fn main() -> gvcl::Result<()> {
    let tasks = gen_toy_clusters(0, 100, 0.4)?;
    let arch = Architecture::Mlp {
        input: 2,
        hidden: vec![16],
    };
    let cfg = TrainConfig {
        epochs: 30,
        eval_samples: 20,
        beta: 0.1,
        lambda: 10.0,
        ..TrainConfig::default()
    };
    for method in [Method::Vcl, Method::Gvcl, Method::GvclFilm, Method::Ewc] {
        let mut learner = Learner::new(method, &arch, &cfg, 0)?;
        let mut rows = Vec::new();
        for (i, task) in tasks.tasks().iter().enumerate() {
            learner.train_task(task)?;
            let evals = learner.evaluate(&tasks.tasks()[..=i])?;
            rows.push(evals.iter().map(|e| e.accuracy).collect());
        }
        let r = ResultMatrix::new(rows, None)?;
        println!("{:>10}: {:?} ACC {:.3} BWT {:+.3}", method.name(), r.rows, acc(&r)?, bwt(&r)?);
    }
    Ok(())
}
