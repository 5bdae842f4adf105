//! Analytic time and space terms of scan-based against attention-based
//! cross-plane modeling as the number of planes grows.
//!
//!     cargo run --release --example complexity_table

use crossplane::complexity::{cross_sa_memory_estimate, space_complexity, time_complexity, Mode};

fn main() -> crossplane::Result<()> {
    let (b, m, d) = (256u128, 196u128, 384u128);
    println!("B={} M={} D={}\n", b, m, d);
    println!("{:>3} {:>16} {:>18} {:>18} {:>18}", "N", "time scan", "time attention", "space scan", "space attention");
    for n in [1u128, 2, 4, 8, 16, 32, 64] {
        println!(
            "{:>3} {:>16} {:>18} {:>18} {:>18}",
            n,
            time_complexity(Mode::HybridLayer, m, n, d)?,
            time_complexity(Mode::CrossSaLayer, m, n, d)?,
            space_complexity(Mode::HybridLayer, b, m, n, d)?,
            space_complexity(Mode::CrossSaLayer, b, m, n, d)?,
        );
    }
    let scan = space_complexity(Mode::HybridLayer, b, m, 16, d)? as f64;
    let sa = cross_sa_memory_estimate(b, m, 16, d)? as f64;
    println!("\ncross-plane attention space / scan layer space at N=16: {:.2}", sa / scan);
    Ok(())
}
