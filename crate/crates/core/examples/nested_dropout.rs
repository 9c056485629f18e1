//! Nested dropout masks over two sites, with the survivor scale per step.
use complab::ablation::{survivor_scale, MaskChain, MaskSite, RngStream};

fn main() -> complab::Result<()> {
    let p = 0.25;
    let mut rng = RngStream::new(7);
    let mut chain = MaskChain::new(p, vec![MaskSite::new("h1", 12), MaskSite::new("h2", 6)])?;
    for _ in 0..3 {
        chain = chain.drop_step(&mut rng);
    }
    for step in 0..=chain.n_steps() {
        println!("step {step}: scale {:.4}", survivor_scale(p, step));
        for (site, alive) in chain.sites().iter().zip(chain.survivors(step)?) {
            let row: String = alive.iter().map(|&a| if a { '#' } else { '.' }).collect();
            println!("    {:<3} {row}", site.name);
        }
    }
    println!("keep probability after {} steps: {:.4}", chain.n_steps(), chain.effective_keep_prob());
    println!("{}", chain.to_json());
    Ok(())
}
