//! Dice, 2D IoU and HD95 on two overlapping synthetic lesions.
//!
//!     cargo run --release --example metrics

use crossplane::datagen::Ellipsoid;
use crossplane::localize::{format_metrics, metrics};

fn main() -> crossplane::Result<()> {
    let dims = [16, 24, 24];
    let mut truth = vec![0u8; dims.iter().product()];
    Ellipsoid::axis_aligned([8.0, 12.0, 12.0], [4.0, 6.0, 5.0]).rasterize(dims, &mut truth);
    for shift in [0.0, 1.0, 2.0, 4.0, 8.0] {
        let mut pred = vec![0u8; truth.len()];
        Ellipsoid::axis_aligned([8.0, 12.0, 12.0 + shift], [4.0, 6.0, 5.0]).rasterize(dims, &mut pred);
        let m = metrics(&pred, &truth, dims)?;
        println!("shift {}", shift);
        print!(
            "{}",
            format_metrics(&[("dsc".into(), m.dsc), ("hd95".into(), m.hd95), ("iou".into(), m.iou)])
        );
    }
    Ok(())
}
