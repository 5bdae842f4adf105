//! Interleaving patch tokens across planes and the causal reach of the
//! cross-plane scan.
//!
//!     cargo run --release --example cross_plane_scan

use crossplane::cpm::{cpm_block, deinterleave, interleave, interleaved_index};
use crossplane::mamba::{MambaBlock, MambaConfig};
use crossplane::nn::{LayerNorm, ParamStore};
use crossplane::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> crossplane::Result<()> {
    let (planes, m, d) = (3, 4, 6);

    // token value = 10·plane + patch, so the order is readable
    let patches = Tensor::<f64>::from_fn(&[planes, m, 1], |i| (10 * (i / m) + i % m) as f64);
    let seq = interleave(&patches)?;
    println!("scan order: {:?}", seq.data());
    assert_eq!(deinterleave(&seq, planes)?, patches);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let norm = LayerNorm::new(&mut store, "cpm.0.norm", d);
    let mamba = MambaBlock::new(&mut store, "cpm.0.mixer", MambaConfig::new(d), &mut rng);
    let tokens = Tensor::<f64>::randn(&[planes, 1 + m, d], 1.0, &mut rng);
    let run = |x: &Tensor<f64>| -> crossplane::Result<Tensor<f64>> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        Ok(cpm_block(&p, &norm, &mamba, tape.constant(x.clone()), planes)?.to_tensor())
    };
    let base = run(&tokens)?;

    // perturb patch 1 of plane 2 and list which outputs move
    let (pm, pn) = (1, 2);
    let mut bumped = tokens.clone();
    for k in 0..d {
        bumped.data_mut()[(pn * (1 + m) + 1 + pm) * d + k] += 0.5 * (k + 1) as f64;
    }
    let moved = run(&bumped)?;
    println!("\nperturbed token at scan index {}", interleaved_index(pm, pn, planes));
    for mi in 0..m {
        let row: String = (0..planes)
            .map(|n| {
                let at = |t: &Tensor<f64>| (0..d).map(|k| t.get(&[n, 1 + mi, k])).collect::<Vec<_>>();
                let changed = at(&base).iter().zip(at(&moved)).any(|(a, b)| *a != b);
                format!("{:>3}:{}", interleaved_index(mi, n, planes), if changed { "x" } else { "." })
            })
            .collect();
        println!("patch {}  {}", mi, row);
    }
    Ok(())
}
