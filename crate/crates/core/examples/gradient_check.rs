//! Central-difference check of the training loss gradient on a tiny V3
//! encoder in f64.
//!
//!     cargo run --release --example gradient_check

use std::time::Instant;

use crossplane::encoder::{training_loss, Model, ModelConfig, Variant};
use crossplane::gradcheck::{check_params, jitter_params};
use crossplane::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> crossplane::Result<()> {
    let config = ModelConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        patch: 2,
        height: 4,
        width: 4,
        planes: 2,
        variant: Variant::V3,
        ..ModelConfig::default()
    };
    let (model, mut store) = Model::new::<f64>(&config, 13)?;
    // lift weights off the tiny init so differences are not pure rounding
    jitter_params(&mut store, 0.3, &mut ChaCha8Rng::seed_from_u64(15));
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::<f64>::uniform(&[4, 4, 4], 0.0, 1.0, &mut rng);
    let labels = [1u8, 0, 1, 1];

    let t0 = Instant::now();
    let errs = check_params(
        &store,
        |_, p| {
            let out = model.forward(p, &x)?;
            training_loss(out.y_class, out.y_patch, &labels, 1.5)
        },
        1e-5,
    )?;
    println!("{:<34} {:>11} {:>11} {:>11}", "parameter", "norm_rel", "max_rel", "|grad|");
    for e in &errs {
        println!("{:<34} {:>11.3e} {:>11.3e} {:>11.3e}", e.name, e.norm_rel, e.max_rel, e.grad_norm);
    }
    let worst = errs.iter().map(|e| e.norm_rel).fold(0.0, f64::max);
    println!("\n{} tensors, worst norm_rel {:.3e}, {:.1?}", errs.len(), worst, t0.elapsed());
    Ok(())
}
