use std::collections::BTreeMap;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use complab::ablation::{survivor_scale, CropChain, MaskChain, MaskSite, RngStream, SiteMasks};
use complab::autodiff::{grad_check, Coords};
use complab::autodiff::{Graph, NodeId, Tensor};
use complab::cmploss::{
    comparative_loss, comparative_loss_node, dynamic_weights, weighted_form, ComparisonChain,
    Strategy,
};
use complab::models::{forward, partition, Head, InputKind, ModelConfig, ModelInput, ModelParams};
use complab::tasks::{
    gen_classification, gen_extraction, gen_ranking, task_loss, ClsParams, Dataset, Label,
    RankParams, Sample, Segment, SegmentedContext, SpanParams, Target, TaskKind,
};
use complab::train::{
    default_model, epoch_order, evaluate, init_seed, order_violation_rate, per_query_rr,
    robustness_index, train, AblationStep, BPolicy, TrainConfig, TrainOptions,
};
use complab::Error;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn with_budget(limit: Option<Duration>, run: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t = Instant::now();
    let mut o = run();
    let took = t.elapsed();
    if let Some(limit) = limit {
        if took > limit {
            o.pass = false;
            o.detail = format!("{} (over the {:?} budget)", o.detail, limit);
        }
    }
    (o, took)
}

type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = vec![
        ("algebraic identity", Some(Duration::from_secs(5)), algebraic_identity),
        ("degeneracy", Some(Duration::from_secs(10)), degeneracy),
        ("gradient correctness", Some(Duration::from_secs(60)), gradient_correctness),
        ("gradient routing", None, gradient_routing),
        ("mask laws", None, mask_laws),
        ("crop laws", None, crop_laws),
        ("cost law", None, cost_law),
        ("strategy ordering", Some(Duration::from_secs(600)), strategy_ordering),
        ("order violations", None, order_violations),
        ("robustness index", None, robustness),
    ];
    let mut failed = Vec::new();
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        let (o, took) = with_budget(limit, run);
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag} {name} [{:.1}s]: {}", i + 1, took.as_secs_f64(), o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}

fn algebraic_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut sums_ok = true;
    for _ in 0..10_000 {
        let c = rng.gen_range(0..=4);
        let losses: Vec<f64> = (0..=c).map(|_| rng.gen_range(0.0..2.0)).collect();
        let b = if rng.gen_bool(0.5) { 0.0 } else { losses[0] };
        let chain = ComparisonChain::new(losses.clone(), b).unwrap();
        worst = worst.max((comparative_loss(&chain) - weighted_form(&chain)).abs());
        let alpha = dynamic_weights(&chain);
        let above = losses.iter().filter(|&&l| l > b).count() as i64;
        let real: i64 = alpha.real().iter().sum();
        sums_ok &= alpha.total() == 0 && real == above;
    }
    outcome(
        worst <= 1e-9 && sums_ok,
        format!("max |hinge - weighted| = {worst:.2e}, weight sums exact = {sums_ok}"),
    )
}

/// Plain minibatch SGD on the task loss, written against the graph API only.
fn erm_oracle(data: &Dataset, seed: u64, lr: f64, batch: usize, epochs: usize) -> (Vec<f64>, ModelParams) {
    let model = default_model(data);
    let mut params = model.init_params(init_seed(seed)).unwrap();
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        for chunk in epoch_order(seed, epoch, data.len()).chunks(batch) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &id in chunk {
                let sample = &data.samples[id];
                let all: Vec<usize> = (0..sample.support(0).len()).collect();
                let (input, target) = sample.materialize(0, &all).unwrap();
                let mut g = Graph::new();
                let nodes = params.bind(&mut g, true);
                let out = forward(&model, &mut g, &nodes, &input, &model.identity_masks()).unwrap();
                let loss = task_loss(&mut g, out, &target).unwrap();
                g.backward(loss).unwrap();
                losses.push(g.value(loss).item());
                let grads: Vec<Tensor> = nodes
                    .iter()
                    .zip(params.iter())
                    .map(|(&n, p)| g.grad(n).cloned().unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
                    .collect();
                acc = Some(match acc {
                    None => grads,
                    Some(a) => a
                        .iter()
                        .zip(&grads)
                        .map(|(x, y)| x.zip_map(y, |p, q| p + q).unwrap())
                        .collect(),
                });
            }
            let n = chunk.len() as f64;
            let next: Vec<Tensor> = params
                .tensors()
                .iter()
                .zip(acc.unwrap())
                .map(|(w, d)| w.zip_map(&d.map(|x| x / n), |a, b| a - lr * b).unwrap())
                .collect();
            params = params.with_tensors(next).unwrap();
        }
    }
    (losses, params)
}

fn degeneracy() -> Outcome {
    let data = gen_classification(
        11,
        &ClsParams {
            n_samples: 400,
            ..ClsParams::default()
        },
    )
    .unwrap();
    let cfg = TrainConfig {
        lr: 0.05,
        batch_size: 4,
        epochs: 2,
        ..TrainConfig::erm(TaskKind::Cls, 3)
    };
    let run = train(&cfg, &data, &TrainOptions::default()).unwrap();
    let (losses, params) = erm_oracle(&data, 3, cfg.lr, cfg.batch_size, cfg.epochs);
    let steps = run.record.steps.last().map_or(0, |s| s.step + 1);
    let trace_same = run.record.steps.len() == losses.len()
        && run
            .record
            .steps
            .iter()
            .zip(&losses)
            .all(|(s, l)| s.losses[0].to_bits() == l.to_bits() && s.cmp_loss.to_bits() == l.to_bits());
    let params_same = run
        .params
        .tensors()
        .iter()
        .zip(params.tensors())
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    outcome(
        steps == 200 && trace_same && params_same,
        format!("{steps} steps, loss trace bit-identical = {trace_same}, final params bit-identical = {params_same}"),
    )
}

/// Hinge loss over a fixed chain of (masks, retained segments) levels.
fn chain_loss(
    model: &ModelConfig,
    template: &ModelParams,
    tensors: &[Tensor],
    sample: &Sample,
    levels: &[(SiteMasks, Vec<usize>)],
) -> complab::Result<(f64, Vec<Tensor>)> {
    let params = template.with_tensors(tensors.to_vec())?;
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, true);
    let mut losses = Vec::new();
    for (masks, retained) in levels {
        let (input, target) = sample.materialize(0, retained)?;
        let out = forward(model, &mut g, &nodes, &input, masks)?;
        losses.push(task_loss(&mut g, out, &target)?);
    }
    let root = comparative_loss_node(&mut g, &losses, 0.0)?;
    g.backward(root)?;
    let grads = grads_of(&g, &nodes, &params);
    Ok((g.value(root).item(), grads))
}

fn grads_of(g: &Graph, nodes: &[NodeId], params: &ModelParams) -> Vec<Tensor> {
    nodes
        .iter()
        .zip(params.iter())
        .map(|(&n, p)| g.grad(n).cloned().unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
        .collect()
}

/// Levels for `schedule` starting from the full input.
fn fixed_levels(
    model: &ModelConfig,
    sample: &Sample,
    schedule: &[AblationStep],
    rng: &mut RngStream,
) -> Vec<(SiteMasks, Vec<usize>)> {
    let mut masks = MaskChain::new(0.1, model.mask_sites()).unwrap();
    let mut crop = CropChain::new(sample.support(0)).unwrap();
    let mut levels = vec![(model.identity_masks(), crop.current().to_vec())];
    for step in schedule {
        match step {
            AblationStep::Drop => masks = masks.drop_step(rng),
            AblationStep::Crop => crop = crop.crop_step(rng).unwrap(),
        }
        levels.push((masks.masks_for_step(masks.n_steps()).unwrap(), crop.current().to_vec()));
    }
    levels
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let segment = |rng: &mut ChaCha8Rng, support| Segment {
        ids: (0..4).map(|_| rng.gen_range(0..8)).collect(),
        support,
    };
    let cls = Sample::Context(SegmentedContext {
        task: TaskKind::Cls,
        segments: vec![
            segment(&mut rng, false),
            segment(&mut rng, true),
            segment(&mut rng, false),
            segment(&mut rng, false),
        ],
        label: Label::Class(2),
        meta: serde_json::Value::Null,
    });
    let mlp = ModelConfig::mlp_tokens(8, &[16], 4);
    assert_eq!(mlp.dims, vec![8, 16, 4]);

    let enc = ModelConfig::encoder(InputKind::Tokens { vocab: 8 }, 8, 16, Head::Classify { classes: 4 });

    let mut errs = Vec::new();
    for (model, sample, schedule, seed) in [
        (&mlp, &cls, [AblationStep::Drop, AblationStep::Crop], 21u64),
        (&enc, &cls, [AblationStep::Crop, AblationStep::Drop], 22u64),
    ] {
        let params = model.init_params(seed).unwrap();
        let levels = fixed_levels(model, sample, &schedule, &mut RngStream::new(seed));
        let report = grad_check(
            |t| chain_loss(model, &params, t, sample, &levels),
            &params.tensors(),
            1e-5,
            Coords::Sample { count: 200, seed },
        )
        .unwrap();
        errs.push(report.max_rel_error);
    }
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst <= 1e-4,
        format!("max relative error mlp {:.2e}, encoder {:.2e} (200 coordinates each)", errs[0], errs[1]),
    )
}

fn single_loss(model: &ModelConfig, params: &ModelParams, x: &Tensor, y: usize, masks: &SiteMasks) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, true);
    let out = forward(model, &mut g, &nodes, &ModelInput::Features(x.clone()), masks).unwrap();
    let l = task_loss(&mut g, out, &Target::Class(y)).unwrap();
    g.backward(l).unwrap();
    (g.value(l).item(), grads_of(&g, &nodes, params))
}

fn gradient_routing() -> Outcome {
    let model = ModelConfig::mlp(&[8, 16, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for attempt in 0..1000u64 {
        let params = model.init_params(100 + attempt).unwrap();
        let x = Tensor::new(vec![1, 8], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = rng.gen_range(0..4);
        let chain = MaskChain::new(0.3, model.mask_sites()).unwrap().drop_step(&mut RngStream::new(attempt));
        let m1 = chain.masks_for_step(1).unwrap();
        let (l0, g0) = single_loss(&model, &params, &x, y, &model.identity_masks());
        let (l1, g1) = single_loss(&model, &params, &x, y, &m1);
        if l1 >= l0 {
            continue;
        }
        let survivors: BTreeMap<String, Vec<bool>> = model
            .mask_sites()
            .iter()
            .map(|s| s.name.clone())
            .zip(chain.survivors(1).unwrap())
            .collect();
        let part = partition(&model, &params, &survivors);
        if part.w.is_empty() {
            continue;
        }

        let mut g = Graph::new();
        let nodes = params.bind(&mut g, true);
        let input = ModelInput::Features(x.clone());
        let o0 = forward(&model, &mut g, &nodes, &input, &model.identity_masks()).unwrap();
        let a = task_loss(&mut g, o0, &Target::Class(y)).unwrap();
        let o1 = forward(&model, &mut g, &nodes, &input, &m1).unwrap();
        let b = task_loss(&mut g, o1, &Target::Class(y)).unwrap();
        let root = comparative_loss_node(&mut g, &[a, b], l0).unwrap();
        g.backward(root).unwrap();
        let gc = grads_of(&g, &nodes, &params);

        let at = |t: &[Tensor], (i, j): (usize, usize)| t[i].data()[j];
        let masked = part
            .w
            .iter()
            .map(|&c| (at(&gc, c) - at(&g0, c)).abs())
            .fold(0.0, f64::max);
        let kept = part
            .u
            .iter()
            .chain(&part.v)
            .map(|&c| (at(&gc, c) - (at(&g0, c) - at(&g1, c))).abs())
            .fold(0.0, f64::max);
        return outcome(
            masked <= 1e-9 && kept <= 1e-9,
            format!(
                "pair l0={l0:.4} > l1={l1:.4}; masked-out max dev {masked:.1e} over {} coords, unmasked max dev {kept:.1e} over {} coords",
                part.w.len(),
                part.u.len() + part.v.len()
            ),
        );
    }
    outcome(false, "no violating pair found")
}

fn mask_laws() -> Outcome {
    let p = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let sites = vec![MaskSite::new("a", 64), MaskSite::new("b", 32)];
    let (mut nested, mut scaled) = (true, true);
    let (mut kept2, mut total2) = (0usize, 0usize);
    for i in 0..1000u64 {
        let steps = rng.gen_range(1..=4);
        let mut stream = RngStream::new(i);
        let mut chain = MaskChain::new(p, sites.clone()).unwrap();
        for _ in 0..steps {
            chain = chain.drop_step(&mut stream);
        }
        for n in 1..=steps {
            let prev = chain.survivors(n - 1).unwrap();
            let now = chain.survivors(n).unwrap();
            nested &= prev.iter().flatten().zip(now.iter().flatten()).all(|(a, b)| *a || !*b);
            let expected = survivor_scale(p, n);
            let independent = (1.0 - p).powi(n as i32);
            for m in chain.masks_for_step(n).unwrap().values() {
                scaled &= m
                    .data()
                    .iter()
                    .all(|&v| v == 0.0 || (v == expected && (v * independent - 1.0).abs() < 1e-15));
            }
            if n == 2 {
                kept2 += now.iter().flatten().filter(|&&a| a).count();
                total2 += now.iter().flatten().count();
            }
        }
    }
    let frac = kept2 as f64 / total2 as f64;
    let target = (1.0 - p) * (1.0 - p);
    let sigma = (target * (1.0 - target) / total2 as f64).sqrt();
    let within = (frac - target).abs() <= 3.0 * sigma;
    outcome(
        nested && scaled && within,
        format!("nesting {nested}, scale exact {scaled}, survivors after 2 steps {frac:.4} vs {target:.2} (3 sigma = {:.4})", 3.0 * sigma),
    )
}

fn crop_laws() -> Outcome {
    let data = gen_extraction(
        17,
        &SpanParams {
            n_samples: 1000,
            ..SpanParams::default()
        },
    )
    .unwrap();
    let (mut support_kept, mut labels_ok, mut shrinks, mut raise_ok) = (true, true, true, true);
    for (i, sample) in data.samples.iter().enumerate() {
        let Sample::Context(ctx) = sample else { unreachable!() };
        let gold = ctx.span_tokens().unwrap().to_vec();
        let mut rng = RngStream::new(i as u64);
        let mut chain = CropChain::new(sample.support(0)).unwrap();
        loop {
            let cur = chain.current().to_vec();
            support_kept &= ctx.segments.iter().enumerate().all(|(j, s)| !s.support || cur.contains(&j));
            let (input, target) = sample.materialize(0, &cur).unwrap();
            labels_ok &= match (input, target) {
                (ModelInput::Tokens(ids), Target::Span { start, end }) => ids[start..=end] == gold[..],
                _ => false,
            };
            let expect_raise = chain.removable().is_empty();
            match chain.crop_step(&mut rng) {
                Ok(next) => {
                    raise_ok &= !expect_raise;
                    let nxt = next.current();
                    shrinks &= nxt.len() < cur.len() && nxt.iter().all(|j| cur.contains(j));
                    chain = next;
                }
                Err(Error::NoCroppableSegments) => {
                    raise_ok &= expect_raise;
                    break;
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }
    outcome(
        support_kept && labels_ok && shrinks && raise_ok,
        format!("support retained {support_kept}, labels re-based {labels_ok}, strict shrinkage {shrinks}, raise exactly when exhausted {raise_ok}"),
    )
}

fn cost_law() -> Outcome {
    let data = gen_classification(
        4,
        &ClsParams {
            n_samples: 64,
            ..ClsParams::default()
        },
    )
    .unwrap();
    let mut ok = true;
    let mut seen = Vec::new();
    for c in 0..=3 {
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::erm(TaskKind::Cls, 1)
        }
        .with_schedule(&vec![AblationStep::Drop; c]);
        let run = train(&cfg, &data, &TrainOptions::default()).unwrap();
        ok &= run.record.steps.iter().all(|s| s.fwd_count == 1 + c);
        seen.push(run.record.cost().forward_per_sample_step);
    }

    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("d.jsonl");
    data.write_jsonl(&data_path).unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"c":2,"p":0.1,"b_policy":"zero","schedule":["drop","drop"],"strategy":"cmp","lr":0.05,"batch_size":8,"epochs":1,"seed":1,"task":"cls","eval_every":0}"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_complab"))
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--data")
        .arg(&data_path)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    let line = String::from_utf8_lossy(&out.stdout).trim().to_string();
    let reported = out.status.success()
        && line.contains("forward_passes=192")
        && line.contains("per_sample_step=3.000")
        && line.contains("relative_cost=3.00x");
    outcome(
        ok && reported,
        format!("forward passes per sample step for c=0..3: {seen:?}; train summary: {line}"),
    )
}

fn cls_protocol() -> (Dataset, Dataset) {
    let all = gen_classification(
        2024,
        &ClsParams {
            n_samples: 3000,
            n_classes: 4,
            n_noise: 6,
            ..ClsParams::default()
        },
    )
    .unwrap();
    all.split(2000)
}

fn cls_base(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        batch_size: 16,
        epochs: 15,
        ..TrainConfig::erm(TaskKind::Cls, seed)
    }
}

const CLS_SCHEDULE: [AblationStep; 2] = [AblationStep::Drop, AblationStep::Crop];

fn strategy_ordering() -> Outcome {
    let (tr, ev) = cls_protocol();
    let base = cls_base(0).with_schedule(&CLS_SCHEDULE);
    let strategies = [Strategy::Cmp, Strategy::Average, Strategy::Second];
    let cmp = complab::experiment::compare_strategies(&base, &strategies, &[1, 2, 3, 4, 5], &tr, &ev).unwrap();
    let mean = |s| cmp.mean(s, "accuracy").unwrap();
    let (c, a, s) = (mean(Strategy::Cmp), mean(Strategy::Average), mean(Strategy::Second));
    outcome(
        c >= a && c >= s && c - s >= 0.005,
        format!("mean accuracy cmp {c:.4}, average {a:.4}, second {s:.4} (cmp - second = {:.2} points)", 100.0 * (c - s)),
    )
}

fn order_violations() -> Outcome {
    let (tr, ev) = cls_protocol();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 1..=5u64 {
        let erm = cls_base(seed);
        let cmp = erm.clone().with_schedule(&CLS_SCHEDULE);
        let a = train(&erm, &tr, &TrainOptions::default()).unwrap();
        let b = train(&cmp, &tr, &TrainOptions::default()).unwrap();
        let ra = order_violation_rate(&a.model, &a.params, &ev, &CLS_SCHEDULE, 0.1, 99, 1).unwrap();
        let rb = order_violation_rate(&b.model, &b.params, &ev, &CLS_SCHEDULE, 0.1, 99, 1).unwrap();
        if rb <= ra {
            wins += 1;
        }
        pairs.push(format!("{rb:.3}/{ra:.3}"));
    }
    outcome(
        wins >= 4,
        format!("cmp <= erm in {wins}/5 seeds (cmp/erm: {})", pairs.join(" ")),
    )
}

fn robustness() -> Outcome {
    let all = gen_ranking(
        2024,
        &RankParams {
            n_queries: 1500,
            ..RankParams::default()
        },
    )
    .unwrap();
    let (tr, ev) = all.split(1000);
    let mut ri = [[0.0f64; 2]; 6];
    let mut mrr = [0.0f64; 2];
    for seed in 1..=5u64 {
        let erm = TrainConfig {
            lr: 0.02,
            epochs: 10,
            ..TrainConfig::erm(TaskKind::Rank, seed)
        };
        let cmp = TrainConfig {
            b_policy: BPolicy::Zero,
            ..erm.clone()
        }
        .with_schedule(&[AblationStep::Crop]);
        for (arm, cfg) in [erm, cmp].iter().enumerate() {
            let run = train(cfg, &tr, &TrainOptions::default()).unwrap();
            let rr: Vec<Vec<f64>> = (0..=5)
                .map(|k| per_query_rr(&run.model, &run.params, &ev, k).unwrap())
                .collect();
            for k in 1..=5 {
                ri[k][arm] += robustness_index(&rr[k], &rr[k - 1]).unwrap() / 5.0;
            }
            mrr[arm] += evaluate(&run.model, &run.params, &ev, None).unwrap()["mrr@10"] / 5.0;
        }
    }
    let ok = (1..=5).all(|k| ri[k][1] >= ri[k][0]);
    let per_depth: Vec<String> = (1..=5)
        .map(|k| format!("k={k} {:+.3}/{:+.3}", ri[k][1], ri[k][0]))
        .collect();
    outcome(
        ok,
        format!("mean RI cmp/erm {}; mrr@10 at depth 5 cmp {:.3}, erm {:.3}", per_depth.join(", "), mrr[1], mrr[0]),
    )
}
