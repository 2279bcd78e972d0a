//! First-layer unit usage of GVCL with and without FiLM on a two-task
//! synthetic sequence.

use gvcl::toys::{pruning_pair, PruningSetup};

fn main() -> gvcl::Result<()> {
    let setup = PruningSetup {
        config: gvcl::runner::TrainConfig {
            epochs: 100,
            ..PruningSetup::default().config
        },
        ..PruningSetup::default()
    };
    let run = pruning_pair(&setup, 0)?;
    for (name, arm) in [("FiLM", &run.film), ("no FiLM", &run.plain)] {
        println!(
            "{name:>8}: active units per task {:?}, of which negative-bias {}, accuracy {:?}",
            arm.active, arm.active_negative_bias, arm.accuracy
        );
    }
    let last = setup.tasks - 1;
    let first_layer = run.units.iter().filter(|u| u.layer == 0 && u.task == last);
    let (film, plain): (Vec<_>, Vec<_>) = first_layer.partition(|u| u.film);
    for (name, units) in [("FiLM", film), ("no FiLM", plain)] {
        let off = units.iter().filter(|u| u.bias_mean < 0.0).count();
        println!("{name:>8}: {off} of {} units have a negative mean bias", units.len());
    }
    Ok(())
}
