//! Central-difference check of comparative-loss gradients on a small MLP.
use complab::ablation::{MaskChain, RngStream};
use complab::autodiff::{grad_check, Coords, Graph, Tensor};
use complab::cmploss::comparative_loss_node;
use complab::models::{forward, ModelConfig, ModelInput};
use complab::tasks::{task_loss, Target};

fn main() -> complab::Result<()> {
    let model = ModelConfig::mlp(&[8, 16, 4]);
    let params = model.init_params(1)?;
    let x = ModelInput::Features(Tensor::new(vec![1, 8], (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect())?);
    let target = Target::Class(2);
    let mut rng = RngStream::new(5);
    let chain = MaskChain::new(0.2, model.mask_sites())?.drop_step(&mut rng).drop_step(&mut rng);
    let masks: Vec<_> = (0..=2).map(|s| chain.masks_for_step(s)).collect::<complab::Result<_>>()?;

    let f = |tensors: &[Tensor]| {
        let p = params.with_tensors(tensors.to_vec())?;
        let mut g = Graph::new();
        let nodes = p.bind(&mut g, true);
        let mut losses = Vec::new();
        for m in &masks {
            let out = forward(&model, &mut g, &nodes, &x, m)?;
            losses.push(task_loss(&mut g, out, &target)?);
        }
        let root = comparative_loss_node(&mut g, &losses, 0.0)?;
        g.backward(root)?;
        let grads = nodes
            .iter()
            .zip(p.iter())
            .map(|(&n, q)| g.grad(n).cloned().unwrap_or_else(|| Tensor::zeros(q.tensor.shape())))
            .collect();
        Ok((g.value(root).item(), grads))
    };
    let report = grad_check(f, &params.tensors(), 1e-5, Coords::All)?;
    println!(
        "checked {} coordinates, max relative error {:.3e} at {:?}",
        report.checked, report.max_rel_error, report.worst
    );
    Ok(())
}
