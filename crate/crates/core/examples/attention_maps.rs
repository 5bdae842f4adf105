//! Class-to-patch attention of a briefly trained model on one synthetic
//! volume, exported as PGM images.
//!
//!     cargo run --release --example attention_maps [out_dir]

use std::path::PathBuf;

use crossplane::localize::write_pgm;
use crossplane::pipeline::{self, PipelineConfig};

fn main() -> crossplane::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "attention_maps_out".into()));
    let mut cfg = PipelineConfig::default();
    for (k, v) in [
        ("layers", "2"),
        ("dim", "32"),
        ("planes", "8"),
        ("depth", "16"),
        ("train_count", "24"),
        ("val_count", "2"),
        ("test_count", "1"),
        ("epochs", "6"),
        ("batch_volumes", "8"),
    ] {
        cfg.set(k, v)?;
    }
    pipeline::gen(&cfg, &out)?;
    pipeline::train(&cfg, &out, |e| println!("epoch {} loss {:.4} val_acc {:.3}", e.epoch, e.loss, e.val_acc))?;
    let (model, store) = pipeline::load_checkpoint(&out.join("model/best.tsck"), &cfg.model)?;
    let (_, v) = pipeline::load_split(&out, "test")?.remove(0);
    let pred = pipeline::predict(&model, &store, &pipeline::zscore(&v), &cfg.infer)?;

    let [z, h, w] = v.dims();
    let dir = out.join("maps");
    std::fs::create_dir_all(&dir)?;
    for zi in 0..z {
        let plane = &pred.maps.data()[zi * h * w..(zi + 1) * h * w];
        write_pgm(&dir.join(format!("z{:02}.pgm", zi)), plane, h, w)?;
        let truth: usize = v.mask[zi * h * w..(zi + 1) * h * w].iter().map(|&m| m as usize).sum();
        let hit: usize = pred.mask[zi * h * w..(zi + 1) * h * w].iter().map(|&m| m as usize).sum();
        println!("plane {:2}: truth {:4} px, predicted {:4} px", zi, truth, hit);
    }
    println!("maps written to {}", dir.display());
    Ok(())
}
