//! Measured forward time and peak tracked bytes against planes per volume,
//! with linear and quadratic fits.
//!
//!     cargo run --release --example scaling_bench [target]
//!
//! `target` is V1..V5 or cross_sa (default V3).

use crossplane::complexity::{bench_tsv, Bench, BenchTarget};
use crossplane::encoder::ModelConfig;

fn main() -> crossplane::Result<()> {
    let target: BenchTarget = std::env::args().nth(1).as_deref().unwrap_or("V3").parse()?;
    let config = ModelConfig {
        layers: 2,
        dim: 64,
        patch: 8,
        height: 32,
        width: 32,
        ..ModelConfig::default()
    };
    let bench = Bench::new(target, &config, 0)?;
    let points = bench.series(&[2, 4, 8, 16], 5, Some(16))?;
    print!("{}", bench_tsv(target, &points)?);
    Ok(())
}
