//! Extraction F1 as distractor paragraphs are added back at evaluation.
use complab::experiment::{sweep, SweepAxis};
use complab::tasks::{gen_extraction, SpanParams, TaskKind};
use complab::train::{AblationStep, TrainConfig};

fn main() -> complab::Result<()> {
    let all = gen_extraction(2024, &SpanParams { n_samples: 900, ..SpanParams::default() })?;
    let (tr, ev) = all.split(600);
    let erm = TrainConfig { lr: 0.05, epochs: 6, ..TrainConfig::erm(TaskKind::Span, 0) };
    let cmp = erm.clone().with_schedule(&[AblationStep::Crop, AblationStep::Drop]);
    let sizes: Vec<usize> = (0..=8).collect();
    for (name, cfg) in [("erm", erm), ("cmp", cmp)] {
        let rows = sweep(&cfg, SweepAxis::Context, &sizes, &[1], &tr, &ev)?;
        let line: Vec<String> = rows.iter().map(|r| format!("{}:{:.3}", r.value, r.metric_value)).collect();
        println!("{name} f1 by distractors kept  {}", line.join(" "));
    }
    Ok(())
}
