//! Multi-seed strategy comparisons and sweeps over ablation steps, context
//! sizes and PRF depths.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::cmploss::Strategy;
use crate::error::{Error, Result};
use crate::tasks::{Dataset, TaskKind};
use crate::train::{
    evaluate, order_violation_rate, per_query_rr, robustness_index, train, AblationStep,
    TrainConfig, TrainOptions,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmSummary {
    pub strategy: Strategy,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ArmResult>,
    pub summary: Vec<ArmSummary>,
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut s = seeds.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() != seeds.len() {
        return Err(Error::Config("seeds must be distinct".into()));
    }
    Ok(())
}

/// Sample mean and (n − 1)-normalized standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains one arm per (strategy, seed) on identical data. Rows come back in
/// strategy order, then seed order, regardless of scheduling.
pub fn compare_strategies(
    base: &TrainConfig,
    strategies: &[Strategy],
    seeds: &[u64],
    train_data: &Dataset,
    eval_data: &Dataset,
) -> Result<Comparison> {
    if strategies.is_empty() {
        return Err(Error::Config("at least one strategy is required".into()));
    }
    check_seeds(seeds)?;
    for &s in strategies {
        TrainConfig {
            strategy: s,
            ..base.clone()
        }
        .validate_for(train_data)?;
    }
    let arms: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let opts = TrainOptions::default();
    let results = arms
        .par_iter()
        .map(|&(strategy, seed)| {
            let cfg = TrainConfig {
                strategy,
                seed,
                eval_every: 0,
                ..base.clone()
            };
            let out = train(&cfg, train_data, &opts)?;
            let metrics = evaluate(&out.model, &out.params, eval_data, None)?;
            Ok(metrics
                .into_iter()
                .map(|(metric, value)| ArmResult {
                    strategy,
                    seed,
                    metric,
                    value,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<ArmResult> = results.into_iter().flatten().collect();
    let mut summary = Vec::new();
    for &s in strategies {
        let mut names: Vec<&str> = rows
            .iter()
            .filter(|r| r.strategy == s)
            .map(|r| r.metric.as_str())
            .collect();
        names.sort_unstable();
        names.dedup();
        for name in names {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.strategy == s && r.metric == name)
                .map(|r| r.value)
                .collect();
            let (mean, std) = mean_std(&vals);
            summary.push(ArmSummary {
                strategy: s,
                metric: name.to_string(),
                mean,
                std,
                n: vals.len(),
            });
        }
    }
    Ok(Comparison { rows, summary })
}

impl Comparison {
    /// Mean of `metric` for one strategy.
    pub fn mean(&self, strategy: Strategy, metric: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.strategy == strategy && s.metric == metric)
            .map(|s| s.mean)
    }

    /// Per-seed rows followed by `mean` and `std` rows per strategy.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["strategy", "seed", "metric", "value"])?;
        for r in &self.rows {
            w.write_record([
                r.strategy.name(),
                &r.seed.to_string(),
                &r.metric,
                &r.value.to_string(),
            ])?;
        }
        for s in &self.summary {
            w.write_record([s.strategy.name(), "mean", &s.metric, &s.mean.to_string()])?;
            w.write_record([s.strategy.name(), "std", &s.metric, &s.std.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Number of ablation steps.
    C,
    /// Non-support segments kept at evaluation (distractor count).
    Context,
    /// PRF depth at evaluation, with a robustness index against depth − 1.
    Depth,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::C => "c",
            SweepAxis::Context => "context",
            SweepAxis::Depth => "depth",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c" => Ok(SweepAxis::C),
            "context" => Ok(SweepAxis::Context),
            "depth" => Ok(SweepAxis::Depth),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub axis: SweepAxis,
    pub value: usize,
    pub metric: String,
    pub metric_value: f64,
    pub robustness_index: Option<f64>,
}

/// Schedule of length `c` following the shape of `base`: a leading crop
/// when `base` crops, drops for the remaining steps.
pub fn schedule_for(base: &[AblationStep], c: usize) -> Vec<AblationStep> {
    let mut out = Vec::with_capacity(c);
    if c > 0 && base.first() == Some(&AblationStep::Crop) {
        out.push(AblationStep::Crop);
    }
    while out.len() < c {
        out.push(AblationStep::Drop);
    }
    out
}

pub fn sweep(
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[usize],
    seeds: &[u64],
    train_data: &Dataset,
    eval_data: &Dataset,
) -> Result<Vec<SweepRow>> {
    check_seeds(seeds)?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    match axis {
        SweepAxis::Depth if train_data.kind != TaskKind::Rank => {
            return Err(Error::Config("depth sweeps need the ranking task".into()))
        }
        SweepAxis::Context if train_data.kind == TaskKind::Rank => {
            return Err(Error::Config("use the depth axis for ranking".into()))
        }
        SweepAxis::Depth if values.contains(&0) => {
            return Err(Error::Config("depth sweep values start at 1".into()))
        }
        _ => {}
    }
    base.validate_for(train_data)?;
    let metric = train_data.kind.primary_metric();
    let opts = TrainOptions::default();

    let per_seed = |seed: u64| -> Result<Vec<SweepRow>> {
        let row = |value: usize, metric: &str, v: f64, ri: Option<f64>| SweepRow {
            seed,
            axis,
            value,
            metric: metric.to_string(),
            metric_value: v,
            robustness_index: ri,
        };
        let mut rows = Vec::new();
        match axis {
            SweepAxis::C => {
                for &c in values {
                    let cfg = TrainConfig {
                        seed,
                        ..base.clone()
                    }
                    .with_schedule(&schedule_for(&base.schedule, c));
                    cfg.validate_for(train_data)?;
                    let out = train(&cfg, train_data, &opts)?;
                    let m = evaluate(&out.model, &out.params, eval_data, None)?;
                    rows.push(row(c, metric, m[metric], None));
                    if c > 0 {
                        let ov = order_violation_rate(
                            &out.model,
                            &out.params,
                            eval_data,
                            &cfg.schedule,
                            cfg.p,
                            seed,
                            1,
                        )?;
                        rows.push(row(c, "order_violation_rate", ov, None));
                    }
                }
            }
            SweepAxis::Context => {
                let out = train(&TrainConfig { seed, ..base.clone() }, train_data, &opts)?;
                for &k in values {
                    let m = evaluate(&out.model, &out.params, eval_data, Some(k))?;
                    rows.push(row(k, metric, m[metric], None));
                }
            }
            SweepAxis::Depth => {
                let out = train(&TrainConfig { seed, ..base.clone() }, train_data, &opts)?;
                for &k in values {
                    let now = per_query_rr(&out.model, &out.params, eval_data, k)?;
                    let before = per_query_rr(&out.model, &out.params, eval_data, k - 1)?;
                    let ri = robustness_index(&now, &before)?;
                    let mean = now.iter().sum::<f64>() / now.len() as f64;
                    rows.push(row(k, metric, mean, Some(ri)));
                }
            }
        }
        Ok(rows)
    };
    let all = seeds
        .par_iter()
        .map(|&s| per_seed(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(all.into_iter().flatten().collect())
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "axis", "value", "metric", "metric_value", "robustness_index"])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.axis.to_string(),
            r.value.to_string(),
            r.metric.clone(),
            r.metric_value.to_string(),
            r.robustness_index.map(|x| x.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
