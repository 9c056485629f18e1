//! Hinge and weighted forms of the comparative loss on a few chains.
use complab::cmploss::{comparative_loss, dynamic_weights, strategy_weights, weighted_form, ComparisonChain, Strategy};

fn main() -> complab::Result<()> {
    let chains = [
        (vec![0.5, 0.7], 0.0),
        (vec![0.9, 0.7], 0.0),
        (vec![0.2, 0.5, 0.4], 0.0),
        (vec![0.5, 0.4], 0.5),
    ];
    for (losses, b) in chains {
        let chain = ComparisonChain::new(losses.clone(), b)?;
        let alpha = dynamic_weights(&chain);
        println!(
            "l={losses:?} b={b}: hinge={:.3} weighted={:.3} alpha={:?}",
            comparative_loss(&chain),
            weighted_form(&chain),
            alpha.as_slice()
        );
        for s in Strategy::ALL.into_iter().filter(|&s| s != Strategy::Cmp) {
            if let Ok(w) = strategy_weights(s, &chain) {
                println!("    {s:<8} weights {w:?}");
            }
        }
    }
    Ok(())
}
