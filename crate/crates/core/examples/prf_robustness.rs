//! Robustness index per feedback depth for ERM and crop-trained query encoders.
use complab::experiment::{sweep, SweepAxis};
use complab::tasks::{gen_ranking, RankParams, TaskKind};
use complab::train::{AblationStep, TrainConfig};

fn main() -> complab::Result<()> {
    let all = gen_ranking(2024, &RankParams { n_queries: 900, ..RankParams::default() })?;
    let (tr, ev) = all.split(600);
    let erm = TrainConfig { lr: 0.02, epochs: 10, ..TrainConfig::erm(TaskKind::Rank, 0) };
    let cmp = erm.clone().with_schedule(&[AblationStep::Crop]);
    let depths = [1, 2, 3, 4, 5];
    for (name, cfg) in [("erm", erm), ("cmp", cmp)] {
        let rows = sweep(&cfg, SweepAxis::Depth, &depths, &[1, 2], &tr, &ev)?;
        for k in depths {
            let at: Vec<_> = rows.iter().filter(|r| r.value == k).collect();
            let n = at.len() as f64;
            let mrr = at.iter().map(|r| r.metric_value).sum::<f64>() / n;
            let ri = at.iter().filter_map(|r| r.robustness_index).sum::<f64>() / n;
            println!("{name} depth {k}: mrr@10 {mrr:.3} robustness {ri:+.3}");
        }
    }
    Ok(())
}
