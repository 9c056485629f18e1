//! Toy task models with declared dropout sites.
//!
//! Two architectures: an MLP (optionally over bag-of-words token features)
//! and a single-block, single-head attention encoder over token ids or
//! dense rows. Every dropout site masks a feature unit shared by all token
//! positions, so masking a unit is the same as zeroing the weights into and
//! out of it (see [`zero_units`]).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::{MaskSite, SiteMasks};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{contract, Error, Result};

pub const CHECKPOINT_MAGIC: &str = "CMPLAB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputKind {
    /// Dense feature vector (MLP only).
    Features,
    /// Token ids; token counts for the MLP, embeddings for the encoder.
    Tokens { vocab: usize },
    /// Dense row vectors, one per segment (encoder only).
    Rows { dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Head {
    Classify { classes: usize },
    Span,
    Rank { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// MLP: `[input, hidden.., classes]`. Encoder: `[d_model, d_ff]`.
    pub dims: Vec<usize>,
    pub input: InputKind,
    pub head: Head,
    pub heads: usize,
    pub dropout_sites: Vec<String>,
}

impl ModelConfig {
    /// Feature-input MLP with a dropout site after every hidden activation.
    pub fn mlp(dims: &[usize]) -> Self {
        let classes = *dims.last().unwrap_or(&0);
        let sites = (1..dims.len().saturating_sub(1))
            .map(|k| format!("h{k}"))
            .collect();
        Self {
            arch: Arch::Mlp,
            dims: dims.to_vec(),
            input: InputKind::Features,
            head: Head::Classify { classes },
            heads: 1,
            dropout_sites: sites,
        }
    }

    /// Bag-of-words MLP over a token vocabulary.
    pub fn mlp_tokens(vocab: usize, hidden: &[usize], classes: usize) -> Self {
        let mut dims = vec![vocab];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        Self {
            input: InputKind::Tokens { vocab },
            ..Self::mlp(&dims)
        }
    }

    pub fn encoder(input: InputKind, d_model: usize, d_ff: usize, head: Head) -> Self {
        Self {
            arch: Arch::Encoder,
            dims: vec![d_model, d_ff],
            input,
            head,
            heads: 1,
            dropout_sites: vec!["attn".into(), "ffn".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Config("layer dims must be positive".into()));
        }
        if self.heads != 1 {
            return Err(Error::Config("only single-head attention is supported".into()));
        }
        match self.arch {
            Arch::Mlp => {
                if self.dims.len() < 2 {
                    return Err(Error::Config("an MLP needs input and output dims".into()));
                }
                match self.input {
                    InputKind::Features => {}
                    InputKind::Tokens { vocab } if vocab == self.dims[0] => {}
                    other => {
                        return Err(Error::Config(format!(
                            "MLP input {other:?} does not match input dim {}",
                            self.dims[0]
                        )))
                    }
                }
                match self.head {
                    Head::Classify { classes } if classes == *self.dims.last().unwrap() => {}
                    other => {
                        return Err(Error::Config(format!("MLP cannot use head {other:?}")))
                    }
                }
            }
            Arch::Encoder => {
                if self.dims.len() != 2 {
                    return Err(Error::Config("encoder dims are [d_model, d_ff]".into()));
                }
                if matches!(self.input, InputKind::Features) {
                    return Err(Error::Config("encoder needs token or row input".into()));
                }
            }
        }
        let available = self.available_sites();
        for site in &self.dropout_sites {
            if !available.iter().any(|s| &s.name == site) {
                return Err(Error::Config(format!("unknown dropout site {site:?}")));
            }
        }
        let mut seen = self.dropout_sites.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.dropout_sites.len() {
            return Err(Error::Config("dropout site ids must be unique".into()));
        }
        Ok(())
    }

    fn available_sites(&self) -> Vec<MaskSite> {
        match self.arch {
            Arch::Mlp => (1..self.dims.len() - 1)
                .map(|k| MaskSite::new(format!("h{k}"), self.dims[k]))
                .collect(),
            Arch::Encoder => vec![
                MaskSite::new("attn", self.dims[0]),
                MaskSite::new("ffn", self.dims[0]),
            ],
        }
    }

    /// Declared dropout sites with their unit counts.
    pub fn mask_sites(&self) -> Vec<MaskSite> {
        self.available_sites()
            .into_iter()
            .filter(|s| self.dropout_sites.contains(&s.name))
            .collect()
    }

    /// All-ones masks for every declared site.
    pub fn identity_masks(&self) -> SiteMasks {
        self.mask_sites()
            .into_iter()
            .map(|s| (s.name, Tensor::ones(&[s.units])))
            .collect()
    }

    /// `(name, layer, shape)` for every parameter, in binding order.
    fn layout(&self) -> Vec<(String, String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>| {
            let layer = name.rsplit_once('.').map_or(name, |(l, _)| l).to_string();
            out.push((name.to_string(), layer, shape));
        };
        match self.arch {
            Arch::Mlp => {
                for k in 0..self.dims.len() - 1 {
                    push(&format!("l{k}.w"), vec![self.dims[k], self.dims[k + 1]]);
                    push(&format!("l{k}.b"), vec![self.dims[k + 1]]);
                }
            }
            Arch::Encoder => {
                let (d, ff) = (self.dims[0], self.dims[1]);
                match self.input {
                    InputKind::Tokens { vocab } => push("embed.table", vec![vocab, d]),
                    InputKind::Rows { dim } => {
                        push("in.w", vec![dim, d]);
                        push("in.b", vec![d]);
                    }
                    InputKind::Features => unreachable!("rejected by validate"),
                }
                for p in ["q", "k", "v", "o"] {
                    push(&format!("attn.{p}.w"), vec![d, d]);
                    if p != "k" {
                        push(&format!("attn.{p}.b"), vec![d]);
                    }
                }
                push("ffn.1.w", vec![d, ff]);
                push("ffn.1.b", vec![ff]);
                push("ffn.2.w", vec![ff, d]);
                push("ffn.2.b", vec![d]);
                match self.head {
                    Head::Classify { classes } => {
                        push("head.w", vec![d, classes]);
                        push("head.b", vec![classes]);
                    }
                    Head::Span => {
                        push("start.w", vec![d, 1]);
                        push("start.b", vec![1]);
                        push("end.w", vec![d, 1]);
                        push("end.b", vec![1]);
                    }
                    Head::Rank { dim } => {
                        push("proj.w", vec![d, dim]);
                        push("proj.b", vec![dim]);
                    }
                }
            }
        }
        out
    }

    /// Weights from `U(−s, s)` with `s = sqrt(6 / (fan_in + fan_out))`; biases zero.
    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = self
            .layout()
            .into_iter()
            .map(|(name, layer, shape)| {
                let tensor = if shape.len() == 2 {
                    let s = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let n = shape[0] * shape[1];
                    let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
                    Tensor::new(shape, data)?
                } else {
                    Tensor::zeros(&shape)
                };
                Ok(Param {
                    name,
                    layer,
                    tensor,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams { params })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub layer: String,
    pub tensor: Tensor,
}

/// Named parameter tensors in binding order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    params: Vec<Param>,
}

impl ModelParams {
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.params[idx].tensor
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Same names and layers, new values.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.params.len() {
            return Err(contract("parameter count changed"));
        }
        let params = self
            .params
            .iter()
            .zip(tensors)
            .map(|(p, t)| {
                if t.shape() != p.tensor.shape() {
                    return Err(Error::Shape {
                        op: "with_tensors",
                        left: p.tensor.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                Ok(Param {
                    name: p.name.clone(),
                    layer: p.layer.clone(),
                    tensor: t,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { params })
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.tensor.clone())
                } else {
                    g.input(p.tensor.clone())
                }
            })
            .collect()
    }
}

/// Model input after segment selection.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput {
    Features(Tensor),
    Tokens(Vec<usize>),
    Rows(Tensor),
}

#[derive(Clone, Copy, Debug)]
pub enum Output {
    Logits(NodeId),
    Span { start: NodeId, end: NodeId },
    Query(NodeId),
}

fn masked(
    g: &mut Graph,
    config: &ModelConfig,
    masks: &SiteMasks,
    site: &str,
    x: NodeId,
) -> Result<NodeId> {
    if !config.dropout_sites.iter().any(|s| s == site) {
        return Ok(x);
    }
    let mask = masks
        .get(site)
        .ok_or_else(|| contract(format!("missing mask for dropout site {site:?}")))?;
    let (rows, cols) = g.value(x).dims2();
    if mask.len() != cols {
        return Err(Error::Shape {
            op: "site mask",
            left: vec![rows, cols],
            right: mask.shape().to_vec(),
        });
    }
    let mut tiled = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        tiled.extend_from_slice(mask.data());
    }
    g.apply_mask(x, Tensor::new(vec![rows, cols], tiled)?)
}

fn bag_of_words(ids: &[usize], vocab: usize) -> Result<Tensor> {
    if ids.is_empty() {
        return Err(contract("empty token input"));
    }
    let mut v = vec![0.0; vocab];
    for &t in ids {
        if t >= vocab {
            return Err(Error::Index {
                what: "vocabulary",
                index: t,
                len: vocab,
            });
        }
        v[t] += 1.0;
    }
    Tensor::new(vec![1, vocab], v)
}

/// Records the forward pass of `config` on `g` with parameters `p`.
pub fn forward(
    config: &ModelConfig,
    g: &mut Graph,
    p: &[NodeId],
    input: &ModelInput,
    masks: &SiteMasks,
) -> Result<Output> {
    for site in &config.dropout_sites {
        if !masks.contains_key(site) {
            return Err(contract(format!("missing mask for dropout site {site:?}")));
        }
    }
    match config.arch {
        Arch::Mlp => forward_mlp(config, g, p, input, masks),
        Arch::Encoder => forward_encoder(config, g, p, input, masks),
    }
}

fn forward_mlp(
    config: &ModelConfig,
    g: &mut Graph,
    p: &[NodeId],
    input: &ModelInput,
    masks: &SiteMasks,
) -> Result<Output> {
    let x = match (input, config.input) {
        (ModelInput::Features(t), InputKind::Features) => {
            let (r, c) = t.dims2();
            t.reshape(vec![r, c])?
        }
        (ModelInput::Tokens(ids), InputKind::Tokens { vocab }) => bag_of_words(ids, vocab)?,
        (other, kind) => {
            return Err(contract(format!("MLP with {kind:?} input cannot take {other:?}")))
        }
    };
    let mut h = g.input(x);
    let layers = config.dims.len() - 1;
    for k in 0..layers {
        h = g.affine(h, p[2 * k], p[2 * k + 1])?;
        if k + 1 < layers {
            h = g.relu(h);
            h = masked(g, config, masks, &format!("h{}", k + 1), h)?;
        }
    }
    Ok(Output::Logits(h))
}

fn forward_encoder(
    config: &ModelConfig,
    g: &mut Graph,
    p: &[NodeId],
    input: &ModelInput,
    masks: &SiteMasks,
) -> Result<Output> {
    let d = config.dims[0];
    let (x, next) = match (input, config.input) {
        (ModelInput::Tokens(ids), InputKind::Tokens { .. }) => {
            if ids.is_empty() {
                return Err(contract("empty token input"));
            }
            (g.gather_rows(p[0], ids)?, 1)
        }
        (ModelInput::Rows(rows), InputKind::Rows { .. }) => {
            let r = g.input(rows.clone());
            (g.affine(r, p[0], p[1])?, 2)
        }
        (other, kind) => {
            return Err(contract(format!(
                "encoder with {kind:?} input cannot take {other:?}"
            )))
        }
    };
    let mut rest = p[next..].iter().copied();
    let mut take = || rest.next().expect("layout matches forward");
    let (qw, qb) = (take(), take());
    let kw = take();
    let (vw, vb) = (take(), take());
    let (ow, ob) = (take(), take());
    let (f1w, f1b) = (take(), take());
    let (f2w, f2b) = (take(), take());
    let (hw, hb) = (take(), take());

    let q = g.affine(x, qw, qb)?;
    let k = g.matmul(x, kw)?;
    let v = g.affine(x, vw, vb)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax_rows(scores)?;
    let mixed = g.matmul(attn, v)?;
    let o = g.affine(mixed, ow, ob)?;
    let o = masked(g, config, masks, "attn", o)?;
    let x1 = g.add(x, o)?;

    let f = g.affine(x1, f1w, f1b)?;
    let f = g.relu(f);
    let f = g.affine(f, f2w, f2b)?;
    let f = masked(g, config, masks, "ffn", f)?;
    let x2 = g.add(x1, f)?;

    match config.head {
        Head::Classify { .. } => {
            let pooled = g.mean_rows(x2)?;
            Ok(Output::Logits(g.affine(pooled, hw, hb)?))
        }
        Head::Span => {
            let (ew, eb) = (take(), take());
            let len = g.value(x2).dims2().0;
            let s = g.affine(x2, hw, hb)?;
            let e = g.affine(x2, ew, eb)?;
            Ok(Output::Span {
                start: g.reshape(s, vec![len])?,
                end: g.reshape(e, vec![len])?,
            })
        }
        Head::Rank { .. } => {
            let pooled = g.mean_rows(x2)?;
            let q = g.affine(pooled, hw, hb)?;
            Ok(Output::Query(g.l2_normalize_rows(q)?))
        }
    }
}

/// Forward values without gradient tracking.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputValues {
    Logits(Vec<f64>),
    Span { start: Vec<f64>, end: Vec<f64> },
    Query(Vec<f64>),
}

pub fn predict(
    config: &ModelConfig,
    params: &ModelParams,
    input: &ModelInput,
    masks: &SiteMasks,
) -> Result<OutputValues> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let out = forward(config, &mut g, &p, input, masks)?;
    let v = |id: NodeId| g.value(id).data().to_vec();
    Ok(match out {
        Output::Logits(id) => OutputValues::Logits(v(id)),
        Output::Span { start, end } => OutputValues::Span {
            start: v(start),
            end: v(end),
        },
        Output::Query(id) => OutputValues::Query(v(id)),
    })
}

pub fn rank_score(q: &[f64], d: &[f64]) -> Result<f64> {
    if q.len() != d.len() {
        return Err(Error::Shape {
            op: "rank_score",
            left: vec![q.len()],
            right: vec![d.len()],
        });
    }
    Ok(q.iter().zip(d).map(|(a, b)| a * b).sum())
}

/// A parameter coordinate: (tensor index, flat index).
pub type Coord = (usize, usize);

/// Coordinates feeding into and out of each unit of a dropout site.
fn unit_coords(config: &ModelConfig, params: &ModelParams, site: &str, unit: usize) -> Vec<Coord> {
    let idx = |name: &str| params.index_of(name).expect("layout name");
    let column = |name: &str, out: &mut Vec<Coord>| {
        let i = idx(name);
        let (rows, cols) = params.tensor(i).dims2();
        out.extend((0..rows).map(|r| (i, r * cols + unit)));
    };
    let mut out = Vec::new();
    match config.arch {
        Arch::Mlp => {
            let k: usize = site[1..].parse().expect("site name h<k>");
            column(&format!("l{}.w", k - 1), &mut out);
            out.push((idx(&format!("l{}.b", k - 1)), unit));
            let w = idx(&format!("l{k}.w"));
            let cols = params.tensor(w).dims2().1;
            out.extend((0..cols).map(|c| (w, unit * cols + c)));
        }
        Arch::Encoder => {
            let layer = if site == "attn" { "attn.o" } else { "ffn.2" };
            column(&format!("{layer}.w"), &mut out);
            out.push((idx(&format!("{layer}.b")), unit));
        }
    }
    out
}

/// Returns `params` with every weight into and out of the listed units of
/// `site` set to zero.
pub fn zero_units(
    config: &ModelConfig,
    params: &ModelParams,
    site: &str,
    units: &[usize],
) -> Result<ModelParams> {
    let sites = config.mask_sites();
    let s = sites
        .iter()
        .find(|s| s.name == site)
        .ok_or_else(|| contract(format!("undeclared site {site:?}")))?;
    let mut tensors = params.tensors();
    for &u in units {
        if u >= s.units {
            return Err(Error::Index {
                what: "site units",
                index: u,
                len: s.units,
            });
        }
        for (t, i) in unit_coords(config, params, site, u) {
            tensors[t].data_mut()[i] = 0.0;
        }
    }
    params.with_tensors(tensors)
}

/// Split of parameter coordinates relative to a set of dropped units:
/// `u` touches no dropout site, `v` is adjacent to sites but only to
/// surviving units, `w` is adjacent to at least one dropped unit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Partition {
    pub u: Vec<Coord>,
    pub v: Vec<Coord>,
    pub w: Vec<Coord>,
}

pub fn partition(
    config: &ModelConfig,
    params: &ModelParams,
    survivors: &BTreeMap<String, Vec<bool>>,
) -> Partition {
    let mut role: Vec<Vec<u8>> = params.iter().map(|p| vec![0u8; p.tensor.len()]).collect();
    for site in config.mask_sites() {
        let alive = survivors.get(&site.name);
        for unit in 0..site.units {
            let dropped = alive.is_some_and(|a| !a[unit]);
            for (t, i) in unit_coords(config, params, &site.name, unit) {
                role[t][i] = role[t][i].max(if dropped { 2 } else { 1 });
            }
        }
    }
    let mut out = Partition::default();
    for (t, r) in role.iter().enumerate() {
        for (i, &k) in r.iter().enumerate() {
            match k {
                0 => out.u.push((t, i)),
                1 => out.v.push((t, i)),
                _ => out.w.push((t, i)),
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    config: ModelConfig,
    params: BTreeMap<String, StoredTensor>,
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let file = CheckpointFile {
        magic: CHECKPOINT_MAGIC.to_string(),
        config: config.clone(),
        params: params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    StoredTensor {
                        shape: p.tensor.shape().to_vec(),
                        data: p.tensor.data().to_vec(),
                    },
                )
            })
            .collect(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let file: CheckpointFile = serde_json::from_slice(&fs::read(path)?)?;
    if file.magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {:?}", file.magic)));
    }
    file.config.validate()?;
    let mut stored = file.params;
    let template = file.config.init_params(0)?;
    let tensors = template
        .iter()
        .map(|p| {
            let s = stored
                .remove(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if s.shape != p.tensor.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", p.name)));
            }
            Tensor::new(s.shape, s.data)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
    }
    Ok((file.config.clone(), template.with_tensors(tensors)?))
}
