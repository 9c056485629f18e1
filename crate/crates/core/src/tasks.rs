//! Synthetic classification, extraction and ranking tasks with annotated
//! support segments, plus their losses and metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{contract, Error, Result};
use crate::models::{ModelInput, Output, OutputValues};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Cls,
    Span,
    Rank,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Cls => "cls",
            TaskKind::Span => "span",
            TaskKind::Rank => "rank",
        }
    }

    /// The metric reported as "the" score of a run.
    pub fn primary_metric(self) -> &'static str {
        match self {
            TaskKind::Cls => "accuracy",
            TaskKind::Span => "f1",
            TaskKind::Rank => "mrr@10",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(TaskKind::Cls),
            "span" => Ok(TaskKind::Span),
            "rank" => Ok(TaskKind::Rank),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub ids: Vec<usize>,
    pub support: bool,
}

/// Gold span: `start..=end` inside segment `segment`, segment-relative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanLabel {
    pub segment: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Span(SpanLabel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentedContext {
    pub task: TaskKind,
    pub segments: Vec<Segment>,
    pub label: Label,
    pub meta: Value,
}

impl SegmentedContext {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !self.segments.iter().any(|s| s.support) {
            return Err(contract("context has no support segment"));
        }
        if let Some(bad) = self.segments.iter().flat_map(|s| &s.ids).find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: "vocabulary",
                index: *bad,
                len: vocab,
            });
        }
        match (self.task, self.label) {
            (TaskKind::Cls, Label::Class(_)) => Ok(()),
            (TaskKind::Span, Label::Span(s)) => {
                let seg = self
                    .segments
                    .get(s.segment)
                    .ok_or_else(|| contract("span segment out of range"))?;
                if !seg.support || s.start > s.end || s.end >= seg.ids.len() {
                    return Err(contract("span must lie inside a support segment"));
                }
                Ok(())
            }
            (task, label) => Err(contract(format!("label {label:?} does not fit task {task}"))),
        }
    }

    /// Tokens of the gold span.
    pub fn span_tokens(&self) -> Option<&[usize]> {
        match self.label {
            Label::Span(s) => Some(&self.segments[s.segment].ids[s.start..=s.end]),
            Label::Class(_) => None,
        }
    }
}

/// A ranking query with its candidate pool and base-retriever feedback list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPool {
    pub query: Vec<f64>,
    pub docs: Vec<Vec<f64>>,
    pub positive: usize,
    /// Pool indices ordered by dot product with the raw query.
    pub feedback_order: Vec<usize>,
    pub meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Context(SegmentedContext),
    Pool(RankPool),
}

/// What the task loss compares the model output against.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// Inclusive positions in the concatenated retained tokens.
    Span { start: usize, end: usize },
    Rank { positive: usize, docs: Tensor },
}

impl Sample {
    pub fn kind(&self) -> TaskKind {
        match self {
            Sample::Context(c) => c.task,
            Sample::Pool(_) => TaskKind::Rank,
        }
    }

    /// Support flags of the model-visible segments. For ranking pools the
    /// query is the one support segment followed by `depth` feedback docs.
    pub fn support(&self, depth: usize) -> Vec<bool> {
        match self {
            Sample::Context(c) => c.segments.iter().map(|s| s.support).collect(),
            Sample::Pool(p) => {
                let k = depth.min(p.feedback_order.len());
                std::iter::once(true).chain(std::iter::repeat_n(false, k)).collect()
            }
        }
    }

    /// Model input and target built from the retained segments, in order.
    pub fn materialize(&self, depth: usize, retained: &[usize]) -> Result<(ModelInput, Target)> {
        let n = self.support(depth).len();
        if let Some(&bad) = retained.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                what: "segments",
                index: bad,
                len: n,
            });
        }
        match self {
            Sample::Context(c) => {
                let mut ids = Vec::new();
                let mut target = None;
                for &i in retained {
                    if let Label::Span(s) = c.label {
                        if s.segment == i {
                            target = Some(Target::Span {
                                start: ids.len() + s.start,
                                end: ids.len() + s.end,
                            });
                        }
                    }
                    ids.extend_from_slice(&c.segments[i].ids);
                }
                let target = match c.label {
                    Label::Class(y) => Target::Class(y),
                    Label::Span(_) => {
                        target.ok_or_else(|| contract("gold segment was not retained"))?
                    }
                };
                Ok((ModelInput::Tokens(ids), target))
            }
            Sample::Pool(p) => {
                if retained.first() != Some(&0) {
                    return Err(contract("the query segment must be retained"));
                }
                let dim = p.query.len();
                let rows: Vec<Vec<f64>> = retained
                    .iter()
                    .map(|&i| {
                        let (v, flag) = if i == 0 {
                            (&p.query, 1.0)
                        } else {
                            (&p.docs[p.feedback_order[i - 1]], 0.0)
                        };
                        let mut row = v.clone();
                        row.push(flag);
                        row
                    })
                    .collect();
                let docs = Tensor::from_rows(&p.docs)?;
                debug_assert_eq!(docs.dims2().1, dim);
                Ok((
                    ModelInput::Rows(Tensor::from_rows(&rows)?),
                    Target::Rank {
                        positive: p.positive,
                        docs,
                    },
                ))
            }
        }
    }
}

/// Retains every support segment and the first `keep` non-support ones.
pub fn truncate_context(support: &[bool], keep: Option<usize>) -> Vec<usize> {
    let mut left = keep.unwrap_or(usize::MAX);
    support
        .iter()
        .enumerate()
        .filter(|&(_, &s)| {
            if s {
                true
            } else if left > 0 {
                left -= 1;
                true
            } else {
                false
            }
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    /// Token vocabulary size; the feature dimension for ranking pools.
    pub vocab: usize,
    pub seed: u64,
    pub params: Value,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Largest number of non-support segments in any sample.
    pub fn max_context(&self) -> usize {
        self.samples
            .iter()
            .map(|s| match s {
                Sample::Context(c) => c.segments.iter().filter(|g| !g.support).count(),
                Sample::Pool(p) => p.feedback_order.len(),
            })
            .max()
            .unwrap_or(0)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            let line = match s {
                Sample::Context(c) => serde_json::to_string(c)?,
                Sample::Pool(p) => serde_json::to_string(&json!({
                    "task": "rank",
                    "query": p.query,
                    "docs": p.docs,
                    "positive": p.positive,
                    "feedback_order": p.feedback_order,
                    "meta": p.meta,
                }))?,
            };
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line)?;
            let sample = if v.get("query").is_some() {
                Sample::Pool(serde_json::from_value(v)?)
            } else {
                Sample::Context(serde_json::from_value(v)?)
            };
            samples.push(sample);
        }
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("dataset file is empty".into()))?;
        let kind = first.kind();
        let meta = match first {
            Sample::Context(c) => &c.meta,
            Sample::Pool(p) => &p.meta,
        };
        let vocab = match first {
            Sample::Pool(p) => p.query.len(),
            Sample::Context(_) => meta
                .get("vocab")
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::Config("sample meta lacks vocab".into()))?
                as usize,
        };
        let seed = meta.get("seed").and_then(Value::as_u64).unwrap_or(0);
        for s in &samples {
            if s.kind() != kind {
                return Err(Error::Config("dataset mixes task kinds".into()));
            }
            if let Sample::Context(c) = s {
                c.validate(vocab)?;
            }
        }
        Ok(Self {
            kind,
            vocab,
            seed,
            params: Value::Null,
            samples,
        })
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    /// Consecutive train/eval split.
    pub fn split(&self, n_train: usize) -> (Dataset, Dataset) {
        let n = n_train.min(self.samples.len());
        let part = |samples: &[Sample]| Dataset {
            samples: samples.to_vec(),
            params: self.params.clone(),
            ..*self
        };
        (part(&self.samples[..n]), part(&self.samples[n..]))
    }
}

fn meta(id: usize, vocab: usize, seed: u64) -> Value {
    json!({ "id": id, "vocab": vocab, "seed": seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsParams {
    pub n_samples: usize,
    pub n_classes: usize,
    pub n_support: usize,
    pub n_noise: usize,
    pub segment_len: usize,
    pub vocab: usize,
    /// Class-indicative tokens reserved per class.
    pub keys_per_class: usize,
    /// Class tokens placed in each support segment.
    pub support_keys: usize,
    /// Fraction of noise segments carrying one weakly label-correlated class token.
    pub spurious_rate: f64,
}

impl Default for ClsParams {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_classes: 4,
            n_support: 1,
            n_noise: 6,
            segment_len: 8,
            vocab: 64,
            keys_per_class: 4,
            support_keys: 1,
            spurious_rate: 0.1,
        }
    }
}

/// Classification contexts. Class `c` owns tokens
/// `c*keys_per_class..(c+1)*keys_per_class`; the rest are filler. Support
/// segments hold `support_keys` tokens of the label's class. A spurious
/// noise segment holds one class token, of the label's class with
/// probability 1/2 and of a uniformly drawn class otherwise.
pub fn gen_classification(seed: u64, params: &ClsParams) -> Result<Dataset> {
    let p = params;
    let keys = p.n_classes * p.keys_per_class;
    if p.n_samples == 0
        || p.n_classes < 2
        || p.n_support == 0
        || p.keys_per_class == 0
        || p.support_keys == 0
        || p.segment_len < p.support_keys
        || p.vocab < keys + 2
        || !(0.0..=1.0).contains(&p.spurious_rate)
    {
        return Err(Error::Config(format!("invalid classification parameters {p:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler = |rng: &mut ChaCha8Rng| rng.gen_range(keys..p.vocab);
    let key = |rng: &mut ChaCha8Rng, c: usize| c * p.keys_per_class + rng.gen_range(0..p.keys_per_class);
    let mut samples = Vec::with_capacity(p.n_samples);
    for id in 0..p.n_samples {
        let y = rng.gen_range(0..p.n_classes);
        let mut segments = Vec::with_capacity(p.n_support + p.n_noise);
        for _ in 0..p.n_support {
            let mut ids: Vec<usize> = (0..p.segment_len).map(|_| filler(&mut rng)).collect();
            for slot in ids.iter_mut().take(p.support_keys) {
                *slot = key(&mut rng, y);
            }
            ids.shuffle(&mut rng);
            segments.push(Segment { ids, support: true });
        }
        for _ in 0..p.n_noise {
            let mut ids: Vec<usize> = (0..p.segment_len).map(|_| filler(&mut rng)).collect();
            if rng.gen_bool(p.spurious_rate) {
                let c = if rng.gen_bool(0.5) {
                    y
                } else {
                    rng.gen_range(0..p.n_classes)
                };
                let at = rng.gen_range(0..p.segment_len);
                ids[at] = key(&mut rng, c);
            }
            segments.push(Segment { ids, support: false });
        }
        segments.shuffle(&mut rng);
        samples.push(Sample::Context(SegmentedContext {
            task: TaskKind::Cls,
            segments,
            label: Label::Class(y),
            meta: meta(id, p.vocab, seed),
        }));
    }
    Ok(Dataset {
        kind: TaskKind::Cls,
        vocab: p.vocab,
        seed,
        params: serde_json::to_value(p)?,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanParams {
    pub n_samples: usize,
    pub n_distractors: usize,
    pub segment_len: usize,
    pub vocab: usize,
    pub n_keys: usize,
    pub n_mid: usize,
    pub max_span: usize,
}

impl Default for SpanParams {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_distractors: 8,
            segment_len: 8,
            vocab: 48,
            n_keys: 6,
            n_mid: 4,
            max_span: 4,
        }
    }
}

/// Token layout of the extraction task.
#[derive(Clone, Copy, Debug)]
pub struct SpanVocab {
    pub n_keys: usize,
    pub n_mid: usize,
}

impl SpanVocab {
    pub fn key(self, k: usize) -> usize {
        k
    }
    pub fn begin(self, k: usize) -> usize {
        self.n_keys + k
    }
    pub fn end(self, k: usize) -> usize {
        2 * self.n_keys + k
    }
    pub fn mid(self, m: usize) -> usize {
        3 * self.n_keys + m
    }
    pub fn question_marker(self) -> usize {
        3 * self.n_keys + self.n_mid
    }
    pub fn first_filler(self) -> usize {
        self.question_marker() + 1
    }
}

/// Extraction contexts with two support segments: a question segment
/// holding a marker and a key `k`, and an answer segment holding the span
/// `begin(k) mid.. end(k)`. Distractors hold near-miss spans built from
/// other keys.
pub fn gen_extraction(seed: u64, params: &SpanParams) -> Result<Dataset> {
    let p = params;
    let v = SpanVocab {
        n_keys: p.n_keys,
        n_mid: p.n_mid,
    };
    if p.n_samples == 0
        || p.n_keys < 2
        || p.n_mid == 0
        || p.max_span < 2
        || p.segment_len < p.max_span.max(2)
        || p.vocab < v.first_filler() + 2
    {
        return Err(Error::Config(format!("invalid extraction parameters {p:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler = |rng: &mut ChaCha8Rng| rng.gen_range(v.first_filler()..p.vocab);
    let span_at = |rng: &mut ChaCha8Rng, k: usize| -> (Vec<usize>, usize, usize) {
        let len = rng.gen_range(2..=p.max_span);
        let mut ids: Vec<usize> = (0..p.segment_len).map(|_| filler(rng)).collect();
        let start = rng.gen_range(0..=p.segment_len - len);
        let end = start + len - 1;
        ids[start] = v.begin(k);
        for slot in &mut ids[start + 1..end] {
            *slot = v.mid(rng.gen_range(0..p.n_mid));
        }
        ids[end] = v.end(k);
        (ids, start, end)
    };
    let mut samples = Vec::with_capacity(p.n_samples);
    for id in 0..p.n_samples {
        let k = rng.gen_range(0..p.n_keys);
        let mut question: Vec<usize> = (0..p.segment_len).map(|_| filler(&mut rng)).collect();
        question[0] = v.question_marker();
        question[1] = v.key(k);
        question.shuffle(&mut rng);
        let (answer, start, end) = span_at(&mut rng, k);
        let mut segments = vec![
            (Segment {
                ids: question,
                support: true,
            }, None),
            (Segment {
                ids: answer,
                support: true,
            }, Some((start, end))),
        ];
        for _ in 0..p.n_distractors {
            let other = (k + rng.gen_range(1..p.n_keys)) % p.n_keys;
            let (ids, _, _) = span_at(&mut rng, other);
            segments.push((Segment { ids, support: false }, None));
        }
        segments.shuffle(&mut rng);
        let (gold, (start, end)) = segments
            .iter()
            .enumerate()
            .find_map(|(i, (_, s))| s.map(|s| (i, s)))
            .expect("answer segment present");
        samples.push(Sample::Context(SegmentedContext {
            task: TaskKind::Span,
            segments: segments.into_iter().map(|(s, _)| s).collect(),
            label: Label::Span(SpanLabel {
                segment: gold,
                start,
                end,
            }),
            meta: meta(id, p.vocab, seed),
        }));
    }
    Ok(Dataset {
        kind: TaskKind::Span,
        vocab: p.vocab,
        seed,
        params: serde_json::to_value(p)?,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankParams {
    pub n_queries: usize,
    pub pool_size: usize,
    pub n_feedback: usize,
    pub dim: usize,
    /// Pool documents drawn near the query topic, besides the positive.
    pub n_topical: usize,
    pub query_drift: f64,
    pub topical_noise: f64,
    pub positive_noise: f64,
}

impl Default for RankParams {
    fn default() -> Self {
        Self {
            n_queries: 1000,
            pool_size: 20,
            n_feedback: 5,
            dim: 16,
            n_topical: 6,
            query_drift: 1.0,
            topical_noise: 0.8,
            positive_noise: 0.3,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pool indices sorted by descending score, ties by index.
pub fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Ranks the pool by the average of the query and the relevant feedback docs.
pub fn averaging_oracle(pool: &RankPool, relevant: &[usize], depth: usize) -> Vec<usize> {
    let mut v = pool.query.clone();
    let mut n = 1.0;
    for &d in pool.feedback_order.iter().take(depth) {
        if relevant.contains(&d) {
            v.iter_mut().zip(&pool.docs[d]).for_each(|(a, b)| *a += b);
            n += 1.0;
        }
    }
    v.iter_mut().for_each(|a| *a /= n);
    let scores: Vec<f64> = pool.docs.iter().map(|d| dot(&v, d)).collect();
    order_by_score(&scores)
}

/// Relevant pool ids recorded in a generated pool's meta.
pub fn relevant_docs(pool: &RankPool) -> Vec<usize> {
    pool.meta
        .get("relevant")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|v| v.as_u64().map(|x| x as usize)).collect())
        .unwrap_or_default()
}

/// Ranking pools around a hidden topic vector. The positive and `n_topical`
/// docs sit near the topic, the rest are off-topic, and the query is the
/// topic plus drift. Pools where averaging the query with its relevant
/// feedback docs fails to rank the positive first are redrawn.
pub fn gen_ranking(seed: u64, params: &RankParams) -> Result<Dataset> {
    let p = params;
    if p.n_queries == 0
        || p.pool_size < 2
        || p.n_feedback == 0
        || p.n_feedback > p.pool_size
        || p.dim == 0
        || p.n_topical + 1 > p.pool_size
    {
        return Err(Error::Config(format!("invalid ranking parameters {p:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }
    fn near(rng: &mut ChaCha8Rng, t: &[f64], s: f64) -> Vec<f64> {
        let n = gauss(rng, t.len());
        t.iter().zip(n).map(|(a, b)| a + s * b).collect()
    }
    let mut samples = Vec::with_capacity(p.n_queries);
    for id in 0..p.n_queries {
        let mut attempts = 0u32;
        let pool = loop {
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::Config("ranking generator cannot satisfy its oracle".into()));
            }
            let topic = gauss(&mut rng, p.dim);
            let mut docs = vec![near(&mut rng, &topic, p.positive_noise)];
            for _ in 0..p.n_topical {
                docs.push(near(&mut rng, &topic, p.topical_noise));
            }
            while docs.len() < p.pool_size {
                docs.push(gauss(&mut rng, p.dim));
            }
            let mut perm: Vec<usize> = (0..p.pool_size).collect();
            perm.shuffle(&mut rng);
            let mut shuffled = vec![Vec::new(); p.pool_size];
            for (orig, &at) in perm.iter().enumerate() {
                shuffled[at] = docs[orig].clone();
            }
            let positive = perm[0];
            let relevant: Vec<usize> = perm[..=p.n_topical].to_vec();
            let query = near(&mut rng, &topic, p.query_drift);
            let scores: Vec<f64> = shuffled.iter().map(|d| dot(&query, d)).collect();
            let mut feedback_order = order_by_score(&scores);
            feedback_order.truncate(p.n_feedback);
            let mut sorted_rel = relevant.clone();
            sorted_rel.sort_unstable();
            let pool = RankPool {
                query,
                docs: shuffled,
                positive,
                feedback_order,
                meta: json!({ "id": id, "dim": p.dim, "seed": seed, "relevant": sorted_rel }),
            };
            if averaging_oracle(&pool, &relevant, p.n_feedback)[0] == positive {
                break pool;
            }
        };
        samples.push(Sample::Pool(pool));
    }
    Ok(Dataset {
        kind: TaskKind::Rank,
        vocab: p.dim,
        seed,
        params: serde_json::to_value(p)?,
        samples,
    })
}

/// Records the task loss of `output` against `target` on `g`.
pub fn task_loss(g: &mut Graph, output: Output, target: &Target) -> Result<NodeId> {
    match (output, target) {
        (Output::Logits(z), Target::Class(y)) => g.softmax_cross_entropy(z, *y),
        (Output::Span { start, end }, Target::Span { start: s, end: e }) => {
            let a = g.softmax_cross_entropy(start, *s)?;
            let b = g.softmax_cross_entropy(end, *e)?;
            g.weighted_sum(&[(a, 0.5), (b, 0.5)])
        }
        (Output::Query(q), Target::Rank { positive, docs }) => {
            let dt = g.input(docs.transpose());
            let sims = g.matmul(q, dt)?;
            g.softmax_cross_entropy(sims, *positive)
        }
        (out, t) => Err(contract(format!("output {out:?} does not fit target {t:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class(usize),
    Span(usize, usize),
    /// Pool ids, best first.
    Ranking(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gold {
    Class(usize),
    Span(usize, usize),
    Positive(usize),
}

impl Target {
    pub fn gold(&self) -> Gold {
        match self {
            Target::Class(y) => Gold::Class(*y),
            Target::Span { start, end } => Gold::Span(*start, *end),
            Target::Rank { positive, .. } => Gold::Positive(*positive),
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Decodes model output values into a prediction for `target`'s task.
pub fn decode(out: &OutputValues, target: &Target) -> Result<Prediction> {
    match (out, target) {
        (OutputValues::Logits(z), Target::Class(_)) => Ok(Prediction::Class(argmax(z))),
        (OutputValues::Span { start, end }, Target::Span { .. }) => {
            let mut best = (0, 0);
            let mut score = f64::NEG_INFINITY;
            for (s, a) in start.iter().enumerate() {
                for (e, b) in end.iter().enumerate().skip(s) {
                    if a + b > score {
                        score = a + b;
                        best = (s, e);
                    }
                }
            }
            Ok(Prediction::Span(best.0, best.1))
        }
        (OutputValues::Query(q), Target::Rank { docs, .. }) => {
            let scores: Vec<f64> = (0..docs.dims2().0).map(|r| dot(q, docs.row(r))).collect();
            Ok(Prediction::Ranking(order_by_score(&scores)))
        }
        (o, t) => Err(contract(format!("output {o:?} does not fit target {t:?}"))),
    }
}

/// Token-overlap F1 of two inclusive spans.
pub fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    if hi < lo {
        return 0.0;
    }
    let overlap = (hi - lo + 1) as f64;
    let precision = overlap / (pred.1 - pred.0 + 1) as f64;
    let recall = overlap / (gold.1 - gold.0 + 1) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `1/rank` of `positive` if it is within the top `k`, else 0.
pub fn reciprocal_rank(ranking: &[usize], positive: usize, k: usize) -> f64 {
    ranking
        .iter()
        .take(k)
        .position(|&d| d == positive)
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

pub const RANK_CUTOFF: usize = 10;

pub fn metrics(
    kind: TaskKind,
    predictions: &[Prediction],
    golds: &[Gold],
) -> Result<BTreeMap<String, f64>> {
    if predictions.is_empty() {
        return Err(contract("metrics of an empty prediction set"));
    }
    if predictions.len() != golds.len() {
        return Err(contract("predictions and labels are not aligned"));
    }
    let n = predictions.len() as f64;
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut add = |k: &str, v: f64| *sums.entry(k.to_string()).or_default() += v;
    for (p, g) in predictions.iter().zip(golds) {
        match (kind, p, g) {
            (TaskKind::Cls, Prediction::Class(a), Gold::Class(b)) => {
                add("accuracy", f64::from(u8::from(a == b)))
            }
            (TaskKind::Span, Prediction::Span(s, e), Gold::Span(gs, ge)) => {
                add("em", f64::from(u8::from((s, e) == (gs, ge))));
                add("f1", span_f1((*s, *e), (*gs, *ge)));
            }
            (TaskKind::Rank, Prediction::Ranking(r), Gold::Positive(d)) => {
                let rr = reciprocal_rank(r, *d, RANK_CUTOFF);
                add("mrr@10", rr);
                add("recall@10", f64::from(u8::from(rr > 0.0)));
            }
            (k, p, g) => {
                return Err(contract(format!("prediction {p:?} / label {g:?} do not fit task {k}")))
            }
        }
    }
    Ok(sums.into_iter().map(|(k, v)| (k, v / n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ablation::{CropChain, RngStream};

    fn small_cls(seed: u64, n_noise: usize) -> Dataset {
        gen_classification(
            seed,
            &ClsParams {
                n_samples: 200,
                n_noise,
                ..ClsParams::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn classification_is_deterministic() {
        let a = small_cls(7, 6).to_jsonl().unwrap();
        assert_eq!(a, small_cls(7, 6).to_jsonl().unwrap());
        assert_ne!(a, small_cls(8, 6).to_jsonl().unwrap());
    }

    #[test]
    fn no_noise_means_all_support() {
        for s in &small_cls(1, 0).samples {
            assert!(s.support(0).iter().all(|&b| b));
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let d = small_cls(3, 2);
        let back = Dataset::from_jsonl(&d.to_jsonl().unwrap()).unwrap();
        assert_eq!(back.samples, d.samples);
        assert_eq!(back.vocab, d.vocab);
        assert_eq!(back.seed, 3);

        let s = gen_extraction(4, &SpanParams { n_samples: 20, ..SpanParams::default() }).unwrap();
        let back = Dataset::from_jsonl(&s.to_jsonl().unwrap()).unwrap();
        assert_eq!(back.samples, s.samples);

        let r = gen_ranking(5, &RankParams { n_queries: 10, ..RankParams::default() }).unwrap();
        let back = Dataset::from_jsonl(&r.to_jsonl().unwrap()).unwrap();
        assert_eq!(back.samples, r.samples);
        assert_eq!(back.kind, TaskKind::Rank);
    }

    #[test]
    fn spans_stay_inside_support() {
        let d = gen_extraction(2, &SpanParams { n_samples: 300, ..SpanParams::default() }).unwrap();
        let v = SpanVocab { n_keys: 6, n_mid: 4 };
        for s in &d.samples {
            let Sample::Context(c) = s else { panic!() };
            c.validate(d.vocab).unwrap();
            let toks = c.span_tokens().unwrap();
            assert!(toks[0] >= v.begin(0) && toks[0] < v.end(0));
            assert_eq!(toks[toks.len() - 1] - v.end(0), toks[0] - v.begin(0));
        }
    }

    #[test]
    fn oracle_setting_has_only_gold_segments() {
        let d = gen_extraction(
            2,
            &SpanParams {
                n_samples: 10,
                n_distractors: 0,
                ..SpanParams::default()
            },
        )
        .unwrap();
        for s in &d.samples {
            assert_eq!(s.support(0), vec![true, true]);
        }
    }

    #[test]
    fn cropping_keeps_gold_tokens() {
        let d = gen_extraction(9, &SpanParams { n_samples: 50, ..SpanParams::default() }).unwrap();
        let mut rng = RngStream::new(1);
        for s in &d.samples {
            let Sample::Context(c) = s else { panic!() };
            let gold = c.span_tokens().unwrap().to_vec();
            let mut chain = CropChain::new(s.support(0)).unwrap();
            while let Ok(next) = chain.crop_step(&mut rng) {
                chain = next;
                let (input, target) = s.materialize(0, chain.current()).unwrap();
                let (ModelInput::Tokens(ids), Target::Span { start, end }) = (input, target) else {
                    panic!()
                };
                assert_eq!(&ids[start..=end], gold.as_slice());
            }
        }
    }

    #[test]
    fn ranking_oracle_ranks_positive_first() {
        let d = gen_ranking(11, &RankParams { n_queries: 50, ..RankParams::default() }).unwrap();
        for s in &d.samples {
            let Sample::Pool(p) = s else { panic!() };
            assert!(p.positive < p.docs.len());
            assert_eq!(p.feedback_order.len(), 5);
            assert_eq!(averaging_oracle(p, &relevant_docs(p), 5)[0], p.positive);
        }
    }

    #[test]
    fn ranking_depth_zero_is_query_only() {
        let d = gen_ranking(1, &RankParams { n_queries: 3, ..RankParams::default() }).unwrap();
        let s = &d.samples[0];
        assert_eq!(s.support(0), vec![true]);
        let (input, _) = s.materialize(0, &[0]).unwrap();
        let ModelInput::Rows(rows) = input else { panic!() };
        assert_eq!(rows.shape(), &[1, 17]);
    }

    #[test]
    fn invalid_sizes_are_config_errors() {
        let bad = ClsParams {
            n_support: 0,
            ..ClsParams::default()
        };
        assert!(matches!(gen_classification(0, &bad), Err(Error::Config(_))));
        let bad = RankParams {
            pool_size: 1,
            ..RankParams::default()
        };
        assert!(matches!(gen_ranking(0, &bad), Err(Error::Config(_))));
        let bad = SpanParams {
            vocab: 10,
            ..SpanParams::default()
        };
        assert!(matches!(gen_extraction(0, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        let s = g.input(Tensor::zeros(&[4]));
        let e = g.input(Tensor::zeros(&[4]));
        let l = task_loss(&mut g, Output::Span { start: s, end: e }, &Target::Span { start: 1, end: 2 })
            .unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let mut g = Graph::new();
        let q = g.input(Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap());
        let docs = Tensor::new(vec![8, 3], (0..24).map(|i| if i % 3 == 0 { i as f64 } else { 0.0 }).collect()).unwrap();
        let l = task_loss(&mut g, Output::Query(q), &Target::Rank { positive: 5, docs }).unwrap();
        assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-12);

        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[1, 2]));
        let l = task_loss(&mut g, Output::Logits(z), &Target::Class(0)).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            task_loss(&mut g, Output::Logits(z), &Target::Span { start: 0, end: 0 }),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn metric_examples() {
        let m = metrics(
            TaskKind::Cls,
            &[Prediction::Class(1), Prediction::Class(2)],
            &[Gold::Class(1), Gold::Class(2)],
        )
        .unwrap();
        assert_eq!(m["accuracy"], 1.0);
        assert_eq!(span_f1((2, 5), (4, 7)), 0.5);
        let m = metrics(TaskKind::Span, &[Prediction::Span(2, 5)], &[Gold::Span(4, 7)]).unwrap();
        assert_eq!(m["em"], 0.0);
        assert_eq!(m["f1"], 0.5);
        assert_eq!(reciprocal_rank(&[4, 7, 2, 0], 2, 10), 1.0 / 3.0);
        let m = metrics(
            TaskKind::Rank,
            &[Prediction::Ranking(vec![3, 1])],
            &[Gold::Positive(3)],
        )
        .unwrap();
        assert_eq!(m["mrr@10"], 1.0);
        assert!(metrics(TaskKind::Cls, &[], &[]).is_err());
    }

    #[test]
    fn truncation_keeps_support() {
        let s = [false, true, false, false, true];
        assert_eq!(truncate_context(&s, Some(1)), vec![0, 1, 4]);
        assert_eq!(truncate_context(&s, Some(0)), vec![1, 4]);
        assert_eq!(truncate_context(&s, None), vec![0, 1, 2, 3, 4]);
    }
}
