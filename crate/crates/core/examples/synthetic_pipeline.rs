//! Generate, train, infer and evaluate one variant end to end in a
//! temporary directory.
//!
//!     cargo run --release --example synthetic_pipeline [V1|V2|V3|V4|V5]

use crossplane::pipeline::{self, PipelineConfig};

fn main() -> crossplane::Result<()> {
    let variant = std::env::args().nth(1).unwrap_or_else(|| "V3".into());
    let out = tempfile::tempdir()?;
    let mut cfg = PipelineConfig::default();
    for (k, v) in [
        ("variant", variant.as_str()),
        ("layers", "2"),
        ("dim", "32"),
        ("train_count", "32"),
        ("val_count", "4"),
        ("test_count", "6"),
        ("epochs", "8"),
        ("batch_volumes", "8"),
    ] {
        cfg.set(k, v)?;
    }
    pipeline::gen(&cfg, out.path())?;
    let report = pipeline::train(&cfg, out.path(), |e| {
        println!("epoch {:2}  loss {:.4}  val_acc {:.3}", e.epoch, e.loss, e.val_acc)
    })?;
    println!("best epoch {}", report.best_epoch);
    pipeline::infer(&cfg, out.path())?;
    let (eval, _) = pipeline::eval(&cfg, out.path())?;
    print!("{}", eval.per_volume_tsv());
    print!("{}", eval.metrics_tsv());
    Ok(())
}
