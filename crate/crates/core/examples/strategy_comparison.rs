//! Five weighting strategies over the same data and seeds.
use complab::cmploss::Strategy;
use complab::experiment::compare_strategies;
use complab::tasks::{gen_classification, ClsParams, TaskKind};
use complab::train::{AblationStep, TrainConfig};

fn main() -> complab::Result<()> {
    let all = gen_classification(2024, &ClsParams { n_samples: 3000, ..ClsParams::default() })?;
    let (tr, ev) = all.split(2000);
    let base = TrainConfig { lr: 0.01, epochs: 15, ..TrainConfig::erm(TaskKind::Cls, 0) }
        .with_schedule(&[AblationStep::Drop, AblationStep::Crop]);
    let cmp = compare_strategies(&base, &Strategy::ALL, &[1, 2, 3], &tr, &ev)?;
    for s in cmp.summary.iter().filter(|s| s.metric == "accuracy") {
        println!("{:<8} {:.4} +- {:.4} (n={})", s.strategy, s.mean, s.std, s.n);
    }
    Ok(())
}
