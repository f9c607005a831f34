//! Times one training-mode forward/backward pass of the nano model.

use std::time::Instant;

use rescbam::attention::AttentionVariant;
use rescbam::model::{build_model, Mode, ModelSpec};
use rescbam::tensor::{Tape, Tensor};

fn main() -> rescbam::Result<()> {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    for variant in [AttentionVariant::None, AttentionVariant::ResCbam] {
        let spec = ModelSpec::nano(2, variant);
        let mut model = build_model::<f32>(&spec, 0)?;
        let images = Tensor::full(vec![batch, 3, 64, 64], 0.5f32);
        let reps = 5;
        let (mut fwd, mut bwd) = (0.0, 0.0);
        for _ in 0..reps {
            let t0 = Instant::now();
            let mut tape = Tape::new();
            let x = tape.constant(images.clone());
            let pass = model.forward(&mut tape, x, Mode::Train)?;
            let mut terms = Vec::new();
            for s in &pass.scales {
                let a = tape.mean(s.cls);
                let b = tape.mean(s.reg);
                terms.push(tape.add(a, b)?);
            }
            let mut loss = terms[0];
            for &t in &terms[1..] {
                loss = tape.add(loss, t)?;
            }
            let t1 = Instant::now();
            tape.backward(loss)?;
            fwd += (t1 - t0).as_secs_f64();
            bwd += t1.elapsed().as_secs_f64();
        }
        println!(
            "{variant}: params {} flops/img {:.1}M fwd {:.1} ms bwd {:.1} ms per batch of {batch}",
            model.num_params(),
            model.flops()? as f64 / 1e6,
            fwd / reps as f64 * 1e3,
            bwd / reps as f64 * 1e3
        );
    }
    Ok(())
}
