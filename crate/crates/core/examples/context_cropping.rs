//! Support-preserving crops of one extraction sample until nothing is left to crop.
use complab::ablation::{CropChain, RngStream};
use complab::models::ModelInput;
use complab::tasks::{gen_extraction, Sample, SpanParams, Target};
use complab::Error;

fn main() -> complab::Result<()> {
    let data = gen_extraction(3, &SpanParams { n_samples: 1, n_distractors: 6, ..SpanParams::default() })?;
    let sample = &data.samples[0];
    let Sample::Context(ctx) = sample else { unreachable!() };
    println!("support flags {:?}", sample.support(0));
    println!("gold span tokens {:?}", ctx.span_tokens());
    let mut rng = RngStream::new(11);
    let mut chain = CropChain::new(sample.support(0))?;
    loop {
        let (input, target) = sample.materialize(0, chain.current())?;
        if let (ModelInput::Tokens(ids), Target::Span { start, end }) = (input, target) {
            println!(
                "retained {:?}: {} tokens, span at {start}..={end} -> {:?}",
                chain.current(),
                ids.len(),
                &ids[start..=end]
            );
        }
        match chain.crop_step(&mut rng) {
            Ok(next) => chain = next,
            Err(Error::NoCroppableSegments) => {
                println!("only support left after {} crops", chain.n_steps());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
