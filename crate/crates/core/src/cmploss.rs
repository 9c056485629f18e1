//! The comparative loss over a chain of task losses.
//!
//! A chain holds the task losses `l(0..=c)` of the full model and its `c`
//! progressively ablated submodels, plus a constant baseline `b` standing
//! in for a maximally ablated dummy model at position `c + 1`. The loss is
//! the pairwise hinge `Σ_{i<j} max(0, l(i) − l(j))` over all `c + 2`
//! entries, which equals the dynamically weighted sum `Σ α(i)·l(i)` with
//! integer weights counting violated comparisons.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonChain {
    losses: Vec<f64>,
    b: f64,
}

impl ComparisonChain {
    pub fn new(losses: Vec<f64>, b: f64) -> Result<Self> {
        if losses.is_empty() {
            return Err(contract("a comparison chain needs at least the full-model loss"));
        }
        if let Some((i, l)) = losses.iter().enumerate().find(|(_, l)| !l.is_finite()) {
            return Err(Error::Numeric(format!("loss l_{i} = {l}")));
        }
        if !b.is_finite() {
            return Err(Error::Numeric(format!("baseline b = {b}")));
        }
        if let Some((i, l)) = losses.iter().enumerate().find(|(_, l)| **l < 0.0) {
            return Err(contract(format!("task loss l_{i} = {l} is negative")));
        }
        Ok(Self { losses, b })
    }

    /// Number of ablation steps.
    pub fn c(&self) -> usize {
        self.losses.len() - 1
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// `l(0..=c)` followed by the dummy's `l(c+1) = b`.
    pub fn extended(&self) -> Vec<f64> {
        let mut all = self.losses.clone();
        all.push(self.b);
        all
    }
}

/// `+1` when a less-ablated entry has the larger loss, `−1` when a
/// more-ablated entry has the smaller loss, otherwise `0`.
pub fn cmp_weight(i: usize, j: usize, li: f64, lj: f64) -> Result<i8> {
    if i == j {
        return Err(contract("cmp_weight compares two distinct positions"));
    }
    Ok(if i < j && li > lj {
        1
    } else if i > j && li < lj {
        -1
    } else {
        0
    })
}

/// Integer weights `α(0..=c+1)`; the last entry belongs to the dummy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightVector(Vec<i64>);

impl WeightVector {
    pub fn as_slice(&self) -> &[i64] {
        &self.0
    }

    pub fn total(&self) -> i64 {
        self.0.iter().sum()
    }

    /// Weights of the real models, dummy excluded.
    pub fn real(&self) -> &[i64] {
        &self.0[..self.0.len() - 1]
    }
}

pub fn dynamic_weights(chain: &ComparisonChain) -> WeightVector {
    let l = chain.extended();
    let n = l.len();
    let alpha = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| i64::from(cmp_weight(i, j, l[i], l[j]).expect("i != j")))
                .sum()
        })
        .collect();
    WeightVector(alpha)
}

/// Hinge form: `Σ_{i=0..=c} Σ_{j=i+1..=c+1} max(0, l(i) − l(j))`.
pub fn comparative_loss(chain: &ComparisonChain) -> f64 {
    let l = chain.extended();
    let c = chain.c();
    let mut total = 0.0;
    for i in 0..=c {
        for j in i + 1..=c + 1 {
            total += (l[i] - l[j]).max(0.0);
        }
    }
    total
}

/// Weighted form over all `c + 2` entries, dummy included.
pub fn weighted_form(chain: &ComparisonChain) -> f64 {
    let alpha = dynamic_weights(chain);
    alpha
        .as_slice()
        .iter()
        .zip(chain.extended())
        .map(|(&a, l)| a as f64 * l)
        .sum()
}

/// Weighted form over the real models only; differs from
/// [`weighted_form`] by `−|{i : l(i) > b}|·b`.
pub fn truncated_weighted_form(chain: &ComparisonChain) -> f64 {
    let alpha = dynamic_weights(chain);
    alpha
        .real()
        .iter()
        .zip(chain.losses())
        .map(|(&a, l)| a as f64 * l)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Cmp,
    Average,
    First,
    Second,
    Max,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Cmp,
        Strategy::Average,
        Strategy::First,
        Strategy::Second,
        Strategy::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Cmp => "cmp",
            Strategy::Average => "average",
            Strategy::First => "first",
            Strategy::Second => "second",
            Strategy::Max => "max",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// Weights over `l(0..=c)` for each weighting strategy.
pub fn strategy_weights(strategy: Strategy, chain: &ComparisonChain) -> Result<Vec<f64>> {
    let n = chain.losses().len();
    let mut w = vec![0.0; n];
    match strategy {
        Strategy::Cmp => {
            return Ok(dynamic_weights(chain)
                .real()
                .iter()
                .map(|&a| a as f64)
                .collect())
        }
        Strategy::Average => w.iter_mut().for_each(|v| *v = 1.0 / n as f64),
        Strategy::First => w[0] = 1.0,
        Strategy::Second => {
            if n < 2 {
                return Err(contract("the second strategy needs c >= 1"));
            }
            w[1] = 1.0;
        }
        Strategy::Max => {
            let mut best = 0;
            for (i, &l) in chain.losses().iter().enumerate() {
                if l > chain.losses()[best] {
                    best = i;
                }
            }
            w[best] = 1.0;
        }
    }
    Ok(w)
}

fn chain_values(g: &Graph, losses: &[NodeId], b: f64) -> Result<ComparisonChain> {
    let values = losses
        .iter()
        .map(|&id| {
            let v = g.value(id);
            if v.is_scalar() {
                Ok(v.item())
            } else {
                Err(contract(format!("task loss must be scalar, got {:?}", v.shape())))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ComparisonChain::new(values, b)
}

/// Records the hinge form on `g`. `b` enters as a constant, so no gradient
/// reaches it even when it was copied from a task loss.
pub fn comparative_loss_node(g: &mut Graph, losses: &[NodeId], b: f64) -> Result<NodeId> {
    chain_values(g, losses, b)?;
    let dummy = g.input(Tensor::scalar(b));
    let mut ext = losses.to_vec();
    ext.push(dummy);
    let c = losses.len() - 1;
    let mut terms = Vec::with_capacity((c + 1) * (c + 2) / 2);
    for i in 0..=c {
        for j in i + 1..=c + 1 {
            let diff = g.sub(ext[i], ext[j])?;
            terms.push((g.relu(diff), 1.0));
        }
    }
    g.weighted_sum(&terms)
}

/// Training objective for a strategy: the hinge form for `cmp`, otherwise
/// the strategy's weighted sum of task losses with constant weights.
pub fn strategy_loss_node(
    g: &mut Graph,
    strategy: Strategy,
    losses: &[NodeId],
    b: f64,
) -> Result<NodeId> {
    if strategy == Strategy::Cmp {
        return comparative_loss_node(g, losses, b);
    }
    let chain = chain_values(g, losses, b)?;
    let w = strategy_weights(strategy, &chain)?;
    let terms: Vec<(NodeId, f64)> = losses.iter().copied().zip(w).collect();
    g.weighted_sum(&terms)
}
