//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Enough surface for MLPs, a single attention block, fused softmax
//! cross-entropy and constant masking. Each training step builds a fresh
//! [`Graph`], binds parameters as trainable leaves, and calls
//! [`Graph::backward`] once on a scalar loss.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, Coords, GradCheckReport, REL_FLOOR};
pub use graph::{cross_entropy, Graph, NodeId, NORM_FLOOR};
pub use tensor::Tensor;

/// Evaluates `build` on a fresh graph with `params` as trainable leaves and
/// returns the scalar value plus one gradient per parameter.
pub fn value_and_grad<F>(params: &[Tensor], build: F) -> crate::Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Graph, &[NodeId]) -> crate::Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = build(&mut g, &ids)?;
    g.backward(root)?;
    let value = g.value(root).item();
    let grads = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, grads))
}
