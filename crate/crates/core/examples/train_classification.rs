//! ERM against comparative loss with drop and crop on synthetic classification.
use complab::tasks::{gen_classification, ClsParams, TaskKind};
use complab::train::{evaluate, train, AblationStep, TrainConfig, TrainOptions};

fn main() -> complab::Result<()> {
    let all = gen_classification(2024, &ClsParams { n_samples: 3000, ..ClsParams::default() })?;
    let (tr, ev) = all.split(2000);
    let erm = TrainConfig { lr: 0.01, epochs: 15, ..TrainConfig::erm(TaskKind::Cls, 1) };
    let cmp = erm.clone().with_schedule(&[AblationStep::Drop, AblationStep::Crop]);
    for (name, cfg) in [("erm", erm), ("cmp", cmp)] {
        let out = train(&cfg, &tr, &TrainOptions::default())?;
        let m = evaluate(&out.model, &out.params, &ev, None)?;
        let cost = out.record.cost();
        println!(
            "{name}: accuracy {:.4}, {:.2} forward passes per sample step",
            m["accuracy"], cost.forward_per_sample_step
        );
    }
    Ok(())
}
