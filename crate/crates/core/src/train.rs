//! The comparative training loop, evaluation and diagnostics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::{derive_seed, CropChain, MaskChain, RngStream, SiteMasks};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::cmploss::{dynamic_weights, strategy_loss_node, strategy_weights, ComparisonChain, Strategy};
use crate::error::{contract, Error, Result};
use crate::models::{self, predict, save_checkpoint, Head, InputKind, ModelConfig, ModelParams};
use crate::tasks::{decode, metrics, truncate_context, Dataset, Gold, Label, Prediction, Sample, TaskKind};

const INIT_KEY: u64 = 0x1_0000_0001;
const SHUFFLE_KEY: u64 = 0x1_0000_0002;
const VIOLATION_KEY: u64 = 0x1_0000_0003;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BPolicy {
    Zero,
    FullModelLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationStep {
    Drop,
    Crop,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HingeMode {
    #[default]
    PerSample,
    BatchMean,
}

fn default_p() -> f64 {
    0.1
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

fn is_default<T: Default + PartialEq>(x: &T) -> bool {
    *x == T::default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub c: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    pub b_policy: BPolicy,
    pub schedule: Vec<AblationStep>,
    pub strategy: Strategy,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub task: TaskKind,
    /// Optimizer steps between eval snapshots; 0 evaluates only at the end.
    pub eval_every: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub momentum: f64,
    #[serde(default, skip_serializing_if = "is_default")]
    pub hinge_mode: HingeMode,
    /// Stop after this many evals without improvement of the primary metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
}

impl TrainConfig {
    /// Plain ERM baseline: no ablation, zero baseline.
    pub fn erm(task: TaskKind, seed: u64) -> Self {
        Self {
            c: 0,
            p: default_p(),
            b_policy: BPolicy::Zero,
            schedule: vec![],
            strategy: Strategy::Cmp,
            lr: 0.1,
            batch_size: 16,
            epochs: 5,
            seed,
            task,
            eval_every: 0,
            momentum: 0.0,
            hinge_mode: HingeMode::PerSample,
            patience: None,
            model: None,
        }
    }

    pub fn with_schedule(mut self, schedule: &[AblationStep]) -> Self {
        self.schedule = schedule.to_vec();
        self.c = schedule.len();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schedule.len() != self.c {
            return bad(format!(
                "schedule has {} steps but c = {}",
                self.schedule.len(),
                self.c
            ));
        }
        if self.strategy == Strategy::Second && self.c == 0 {
            return bad("the second strategy needs c >= 1".into());
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad(format!("p must lie in (0, 1), got {}", self.p));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        Ok(())
    }

    /// Validation that needs the training data.
    pub fn validate_for(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        if data.kind != self.task {
            return Err(Error::Config(format!(
                "config task {} does not match dataset task {}",
                self.task, data.kind
            )));
        }
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        if self.schedule.contains(&AblationStep::Crop) && data.max_context() == 0 {
            return Err(Error::Config(
                "crop steps need inputs with non-support segments".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Number of classes seen in a classification dataset.
pub fn n_classes(data: &Dataset) -> usize {
    data.samples
        .iter()
        .filter_map(|s| match s {
            Sample::Context(c) => match c.label {
                Label::Class(y) => Some(y + 1),
                Label::Span(_) => None,
            },
            Sample::Pool(_) => None,
        })
        .max()
        .unwrap_or(2)
        .max(2)
}

/// Architecture used for a task when the config names none.
pub fn default_model(data: &Dataset) -> ModelConfig {
    match data.kind {
        TaskKind::Cls => ModelConfig::mlp_tokens(data.vocab, &[32], n_classes(data)),
        TaskKind::Span => {
            ModelConfig::encoder(InputKind::Tokens { vocab: data.vocab }, 32, 64, Head::Span)
        }
        TaskKind::Rank => ModelConfig::encoder(
            InputKind::Rows { dim: data.vocab + 1 },
            32,
            64,
            Head::Rank { dim: data.vocab },
        ),
    }
}

pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, &[INIT_KEY])
}

/// Sample visiting order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStream::derive(seed, &[SHUFFLE_KEY, epoch as u64]));
    order
}

/// Random stream owning the ablation chain of one sample in one epoch.
pub fn sample_stream(seed: u64, epoch: usize, sample_id: usize) -> RngStream {
    RngStream::derive(seed, &[epoch as u64, sample_id as u64])
}

/// PRF depth drawn for a ranking sample during training.
fn training_depth(sample: &Sample, rng: &mut RngStream) -> usize {
    match sample {
        Sample::Pool(p) => rng.gen_range(0..=p.feedback_order.len()),
        Sample::Context(_) => 0,
    }
}

/// Per-sample, per-step log line.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub sample_id: usize,
    pub losses: Vec<f64>,
    pub b: f64,
    pub alpha: Vec<f64>,
    pub cmp_loss: f64,
    pub fwd_count: usize,
    /// Crop steps skipped because nothing was left to crop.
    pub skipped_crops: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub metric_name: String,
    pub metric_value: f64,
    pub context_size: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub c: usize,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Forward-pass accounting for a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostSummary {
    pub sample_steps: usize,
    pub forward_passes: usize,
    pub forward_per_sample_step: f64,
    /// Forward passes relative to ERM, which runs one per sample step.
    pub relative_cost: f64,
    pub shortened_chains: usize,
}

impl RunRecord {
    pub fn cost(&self) -> CostSummary {
        let n = self.steps.len();
        let fwd: usize = self.steps.iter().map(|s| s.fwd_count).sum();
        let ratio = if n == 0 { 0.0 } else { fwd as f64 / n as f64 };
        CostSummary {
            sample_steps: n,
            forward_passes: fwd,
            forward_per_sample_step: ratio,
            relative_cost: ratio,
            shortened_chains: self.steps.iter().filter(|s| s.skipped_crops > 0).count(),
        }
    }

    /// Last recorded value of a metric at full context.
    pub fn final_metric(&self, name: &str) -> Option<f64> {
        self.evals
            .iter()
            .rev()
            .find(|e| e.metric_name == name && e.context_size.is_none())
            .map(|e| e.metric_value)
    }

    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let c = self.c;
        let mut header = vec!["step".to_string(), "sample_id".to_string()];
        header.extend((0..=c).map(|i| format!("l_{i}")));
        header.push("b".into());
        header.extend((0..=c).map(|i| format!("alpha_{i}")));
        header.push("cmp_loss".into());
        header.push("fwd_count".into());
        w.write_record(&header)?;
        let cell = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.steps {
            let mut row = vec![s.step.to_string(), s.sample_id.to_string()];
            row.extend((0..=c).map(|i| cell(s.losses.get(i))));
            row.push(s.b.to_string());
            row.extend((0..=c).map(|i| cell(s.alpha.get(i))));
            row.push(s.cmp_loss.to_string());
            row.push(s.fwd_count.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_eval_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "metric_name", "metric_value", "context_size"])?;
        for e in &self.evals {
            w.write_record([
                e.step.to_string(),
                e.metric_name.clone(),
                e.metric_value.to_string(),
                e.context_size.map(|c| c.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Task losses along one realized ablation chain.
struct Chain {
    losses: Vec<NodeId>,
    skipped_crops: usize,
}

/// Records `l(0..=c')` for `sample` on `g`, drawing the chain from `rng`.
/// A crop step with nothing left to crop is skipped.
#[allow(clippy::too_many_arguments)]
fn ablation_chain(
    model: &ModelConfig,
    g: &mut Graph,
    p_nodes: &[NodeId],
    sample: &Sample,
    depth: usize,
    schedule: &[AblationStep],
    p: f64,
    rng: &mut RngStream,
) -> Result<Chain> {
    let mut masks = MaskChain::new(p, model.mask_sites())?;
    let mut crop = CropChain::new(sample.support(depth))?;
    let eval = |g: &mut Graph, masks: &SiteMasks, retained: &[usize]| -> Result<NodeId> {
        let (input, target) = sample.materialize(depth, retained)?;
        let out = models::forward(model, g, p_nodes, &input, masks)?;
        crate::tasks::task_loss(g, out, &target)
    };
    let mut losses = vec![eval(g, &model.identity_masks(), crop.current())?];
    let mut skipped_crops = 0;
    for step in schedule {
        match step {
            AblationStep::Drop => masks = masks.drop_step(rng),
            AblationStep::Crop => match crop.crop_step(rng) {
                Ok(next) => crop = next,
                Err(Error::NoCroppableSegments) => {
                    skipped_crops += 1;
                    continue;
                }
                Err(e) => return Err(e),
            },
        }
        let m = masks.masks_for_step(masks.n_steps())?;
        losses.push(eval(g, &m, crop.current())?);
    }
    Ok(Chain {
        losses,
        skipped_crops,
    })
}

fn scalar(g: &Graph, id: NodeId) -> f64 {
    g.value(id).item()
}

/// Strategy objective over realized losses; `second` falls back to the
/// full model when a chain was shortened to length one.
fn objective(
    g: &mut Graph,
    strategy: Strategy,
    losses: &[NodeId],
    b: f64,
) -> Result<(NodeId, Vec<f64>)> {
    let strategy = if strategy == Strategy::Second && losses.len() < 2 {
        Strategy::First
    } else {
        strategy
    };
    let values: Vec<f64> = losses.iter().map(|&l| scalar(g, l)).collect();
    let chain = ComparisonChain::new(values, b)?;
    let alpha = match strategy {
        Strategy::Cmp => dynamic_weights(&chain).real().iter().map(|&a| a as f64).collect(),
        s => strategy_weights(s, &chain)?,
    };
    Ok((strategy_loss_node(g, strategy, losses, b)?, alpha))
}

fn baseline(policy: BPolicy, l0: f64) -> f64 {
    match policy {
        BPolicy::Zero => 0.0,
        BPolicy::FullModelLoss => l0,
    }
}

/// One sample's objective value, parameter gradients and log line.
pub fn sample_gradients(
    model: &ModelConfig,
    params: &ModelParams,
    sample: &Sample,
    sample_id: usize,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(f64, Vec<Tensor>, StepRecord)> {
    let mut g = Graph::new();
    let p_nodes = params.bind(&mut g, true);
    let depth = training_depth(sample, rng);
    let chain = ablation_chain(
        model,
        &mut g,
        &p_nodes,
        sample,
        depth,
        &config.schedule,
        config.p,
        rng,
    )?;
    let b = baseline(config.b_policy, scalar(&g, chain.losses[0]));
    let (root, alpha) = objective(&mut g, config.strategy, &chain.losses, b)?;
    g.backward(root)?;
    let value = scalar(&g, root);
    let grads = collect_grads(&g, &p_nodes, params);
    let record = StepRecord {
        step: 0,
        sample_id,
        losses: chain.losses.iter().map(|&l| scalar(&g, l)).collect(),
        b,
        alpha,
        cmp_loss: value,
        fwd_count: chain.losses.len(),
        skipped_crops: chain.skipped_crops,
    };
    Ok((value, grads, record))
}

fn collect_grads(g: &Graph, p_nodes: &[NodeId], params: &ModelParams) -> Vec<Tensor> {
    p_nodes
        .iter()
        .zip(params.iter())
        .map(|(&id, p)| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))
        })
        .collect()
}

/// `θ − η·g`, elementwise.
pub fn sgd_update(params: &[Tensor], grads: &[Tensor], lr: f64) -> Result<Vec<Tensor>> {
    if params.len() != grads.len() {
        return Err(contract("one gradient per parameter tensor expected"));
    }
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            if !g.all_finite() {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
            p.zip_map(g, |w, d| w - lr * d)
        })
        .collect()
}

/// One optimizer step on a single sample.
pub fn train_step(
    model: &ModelConfig,
    params: &ModelParams,
    sample: &Sample,
    sample_id: usize,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(ModelParams, StepRecord)> {
    let (value, grads, record) = sample_gradients(model, params, sample, sample_id, config, rng)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss {value} on sample {sample_id}")));
    }
    let next = sgd_update(&params.tensors(), &grads, config.lr)?;
    Ok((params.with_tensors(next)?, record))
}

/// Batch objective with the hinge applied to batch-mean losses.
fn batch_mean_gradients(
    model: &ModelConfig,
    params: &ModelParams,
    data: &Dataset,
    batch: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Vec<Tensor>, Vec<StepRecord>)> {
    let mut g = Graph::new();
    let p_nodes = params.bind(&mut g, true);
    let mut chains = Vec::with_capacity(batch.len());
    for &id in batch {
        let mut rng = sample_stream(config.seed, epoch, id);
        let sample = &data.samples[id];
        let depth = training_depth(sample, &mut rng);
        chains.push(ablation_chain(
            model,
            &mut g,
            &p_nodes,
            sample,
            depth,
            &config.schedule,
            config.p,
            &mut rng,
        )?);
    }
    let longest = chains.iter().map(|c| c.losses.len()).max().unwrap_or(1);
    let mut means = Vec::with_capacity(longest);
    for i in 0..longest {
        let terms: Vec<NodeId> = chains.iter().filter_map(|c| c.losses.get(i).copied()).collect();
        let w = 1.0 / terms.len() as f64;
        let weighted: Vec<(NodeId, f64)> = terms.into_iter().map(|t| (t, w)).collect();
        means.push(g.weighted_sum(&weighted)?);
    }
    let b = baseline(config.b_policy, scalar(&g, means[0]));
    let (root, alpha) = objective(&mut g, config.strategy, &means, b)?;
    g.backward(root)?;
    let value = scalar(&g, root);
    let grads = collect_grads(&g, &p_nodes, params);
    let records = batch
        .iter()
        .zip(&chains)
        .map(|(&id, c)| StepRecord {
            step: 0,
            sample_id: id,
            losses: c.losses.iter().map(|&l| scalar(&g, l)).collect(),
            b,
            alpha: alpha.clone(),
            cmp_loss: value,
            fwd_count: c.losses.len(),
            skipped_crops: c.skipped_crops,
        })
        .collect();
    Ok((value, grads, records))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub eval_data: Option<Dataset>,
    /// Checkpoints are written here at eval cadence and on divergence.
    pub out_dir: Option<PathBuf>,
    pub init: Option<ModelParams>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub record: RunRecord,
    pub stopped_early: bool,
}

fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.json")
}

/// Trains for a fixed epoch budget, or until patience runs out.
pub fn train(config: &TrainConfig, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate_for(data)?;
    let model = config.model.clone().unwrap_or_else(|| default_model(data));
    model.validate()?;
    let mut params = match &opts.init {
        Some(p) => p.clone(),
        None => model.init_params(init_seed(config.seed))?,
    };
    let mut velocity: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
    let mut record = RunRecord {
        c: config.c,
        ..RunRecord::default()
    };
    let mut step = 0;
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut last_good: Option<PathBuf> = None;
    let eval_data = opts.eval_data.as_ref();

    let snapshot = |params: &ModelParams, step: usize, record: &mut RunRecord| -> Result<Option<f64>> {
        let Some(eval) = eval_data else { return Ok(None) };
        let m = evaluate(&model, params, eval, None)?;
        let primary = m.get(data.kind.primary_metric()).copied();
        for (name, value) in m {
            record.evals.push(EvalRecord {
                step,
                metric_name: name,
                metric_value: value,
                context_size: None,
            });
        }
        Ok(primary)
    };

    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, data.len());
        for batch in order.chunks(config.batch_size) {
            let computed = match config.hinge_mode {
                HingeMode::PerSample => (|| {
                    let mut sum: Option<Vec<Tensor>> = None;
                    let mut total = 0.0;
                    let mut records = Vec::with_capacity(batch.len());
                    for &id in batch {
                        let mut rng = sample_stream(config.seed, epoch, id);
                        let (v, g, r) =
                            sample_gradients(&model, &params, &data.samples[id], id, config, &mut rng)?;
                        total += v;
                        sum = Some(match sum {
                            None => g,
                            Some(acc) => acc
                                .iter()
                                .zip(&g)
                                .map(|(a, b)| a.zip_map(b, |x, y| x + y))
                                .collect::<Result<_>>()?,
                        });
                        records.push(r);
                    }
                    let n = batch.len() as f64;
                    let grads = sum
                        .expect("non-empty batch")
                        .into_iter()
                        .map(|t| t.map(|x| x / n))
                        .collect::<Vec<_>>();
                    Ok((total / n, grads, records))
                })(),
                HingeMode::BatchMean => {
                    batch_mean_gradients(&model, &params, data, batch, config, epoch)
                }
            };
            let finite = match &computed {
                Ok((loss, grads, _)) => loss.is_finite() && grads.iter().all(Tensor::all_finite),
                Err(Error::Numeric(_)) => false,
                Err(_) => true,
            };
            if !finite {
                if let Some(dir) = &opts.out_dir {
                    save_checkpoint(&checkpoint_path(dir), &model, &params)?;
                    last_good = Some(checkpoint_path(dir));
                }
                return Err(Error::Diverged {
                    step,
                    checkpoint: last_good,
                });
            }
            let (_, grads, mut records) = computed?;
            let update = if config.momentum > 0.0 {
                velocity = velocity
                    .iter()
                    .zip(&grads)
                    .map(|(v, g)| v.zip_map(g, |a, b| config.momentum * a + b))
                    .collect::<Result<_>>()?;
                velocity.clone()
            } else {
                grads
            };
            params = params.with_tensors(sgd_update(&params.tensors(), &update, config.lr)?)?;
            for r in &mut records {
                r.step = step;
            }
            record.steps.extend(records);
            step += 1;

            if config.eval_every > 0 && step % config.eval_every == 0 {
                let primary = snapshot(&params, step, &mut record)?;
                if let Some(dir) = &opts.out_dir {
                    save_checkpoint(&checkpoint_path(dir), &model, &params)?;
                    last_good = Some(checkpoint_path(dir));
                }
                if let (Some(patience), Some(v)) = (config.patience, primary) {
                    if v > best {
                        best = v;
                        since_best = 0;
                    } else {
                        since_best += 1;
                        if since_best >= patience {
                            return Ok(TrainOutcome {
                                model,
                                params,
                                record,
                                stopped_early: true,
                            });
                        }
                    }
                }
            }
        }
    }
    if config.eval_every == 0 || step % config.eval_every != 0 {
        snapshot(&params, step, &mut record)?;
    }
    Ok(TrainOutcome {
        model,
        params,
        record,
        stopped_early: false,
    })
}

/// Predictions and gold labels of the full model, one per sample.
/// `context_size` keeps that many non-support segments (PRF depth for
/// ranking); `None` keeps everything.
pub fn predict_dataset(
    model: &ModelConfig,
    params: &ModelParams,
    data: &Dataset,
    context_size: Option<usize>,
) -> Result<Vec<(Prediction, Gold)>> {
    let masks = model.identity_masks();
    data.samples
        .par_iter()
        .map(|s| {
            let depth = match s {
                Sample::Pool(p) => context_size.unwrap_or(p.feedback_order.len()),
                Sample::Context(_) => 0,
            };
            let retained = truncate_context(&s.support(depth), context_size);
            let (input, target) = s.materialize(depth, &retained)?;
            let out = predict(model, params, &input, &masks)?;
            Ok((decode(&out, &target)?, target.gold()))
        })
        .collect()
}

pub fn evaluate(
    model: &ModelConfig,
    params: &ModelParams,
    data: &Dataset,
    context_size: Option<usize>,
) -> Result<BTreeMap<String, f64>> {
    let (preds, golds): (Vec<_>, Vec<_>) = predict_dataset(model, params, data, context_size)?
        .into_iter()
        .unzip();
    metrics(data.kind, &preds, &golds)
}

/// Fraction of `(sample, chain, i<j)` with `l(i) > l(j)` over sampled
/// ablation chains of the full-context model.
pub fn order_violation_rate(
    model: &ModelConfig,
    params: &ModelParams,
    data: &Dataset,
    schedule: &[AblationStep],
    p: f64,
    seed: u64,
    n_chains: usize,
) -> Result<f64> {
    if schedule.is_empty() {
        return Err(contract("order violations need at least one ablation step"));
    }
    if n_chains == 0 {
        return Err(contract("n_chains must be at least 1"));
    }
    let counts = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(id, s)| {
            let depth = match s {
                Sample::Pool(p) => p.feedback_order.len(),
                Sample::Context(_) => 0,
            };
            let mut violated = 0usize;
            let mut pairs = 0usize;
            for r in 0..n_chains {
                let mut rng = RngStream::derive(seed, &[VIOLATION_KEY, id as u64, r as u64]);
                let mut g = Graph::new();
                let p_nodes = params.bind(&mut g, false);
                let chain = ablation_chain(model, &mut g, &p_nodes, s, depth, schedule, p, &mut rng)?;
                let l: Vec<f64> = chain.losses.iter().map(|&id| scalar(&g, id)).collect();
                for i in 0..l.len() {
                    for j in i + 1..l.len() {
                        pairs += 1;
                        violated += usize::from(l[i] > l[j]);
                    }
                }
            }
            Ok((violated, pairs))
        })
        .collect::<Result<Vec<_>>>()?;
    let (v, n) = counts
        .into_iter()
        .fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
    if n == 0 {
        return Err(contract("no ablation pairs were realized"));
    }
    Ok(v as f64 / n as f64)
}

/// `(N+ − N−)/|Q|` between per-query metrics at depth `k` and `k − 1`.
pub fn robustness_index(with_k: &[f64], with_k_minus_1: &[f64]) -> Result<f64> {
    if with_k.is_empty() {
        return Err(contract("robustness index of an empty query set"));
    }
    if with_k.len() != with_k_minus_1.len() {
        return Err(contract("query sets are not aligned"));
    }
    let net: i64 = with_k
        .iter()
        .zip(with_k_minus_1)
        .map(|(a, b)| match a.partial_cmp(b) {
            Some(std::cmp::Ordering::Greater) => 1,
            Some(std::cmp::Ordering::Less) => -1,
            _ => 0,
        })
        .sum();
    Ok(net as f64 / with_k.len() as f64)
}

/// Per-query reciprocal rank@10 at a PRF depth.
pub fn per_query_rr(
    model: &ModelConfig,
    params: &ModelParams,
    data: &Dataset,
    depth: usize,
) -> Result<Vec<f64>> {
    Ok(predict_dataset(model, params, data, Some(depth))?
        .into_iter()
        .map(|(p, g)| match (p, g) {
            (Prediction::Ranking(r), Gold::Positive(d)) => {
                crate::tasks::reciprocal_rank(&r, d, crate::tasks::RANK_CUTOFF)
            }
            _ => 0.0,
        })
        .collect())
}

/// Writes steps.csv, eval.csv, summary.json and the final checkpoint.
pub fn write_run(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    outcome.record.write_steps_csv(&dir.join("steps.csv"))?;
    outcome.record.write_eval_csv(&dir.join("eval.csv"))?;
    save_checkpoint(&checkpoint_path(dir), &outcome.model, &outcome.params)?;
    let final_metrics: BTreeMap<&str, f64> = outcome
        .record
        .evals
        .iter()
        .filter(|e| e.context_size.is_none())
        .map(|e| (e.metric_name.as_str(), e.metric_value))
        .collect();
    let summary = serde_json::json!({
        "config": config,
        "cost": outcome.record.cost(),
        "final_metrics": final_metrics,
        "stopped_early": outcome.stopped_early,
    });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}
