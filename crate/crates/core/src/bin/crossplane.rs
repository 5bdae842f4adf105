use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crossplane::pipeline::{self, Artifact, PipelineConfig};
use crossplane::Error;

#[derive(Parser)]
#[command(name = "crossplane", version, about = "Cross-plane hybrid encoder: data, training, localization, complexity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test synthetic volumes under OUT/data
    Gen(Common),
    /// Train on OUT/data, write OUT/model
    Train(Common),
    /// Localization maps and masks for OUT/data/test, written to OUT/pred
    Infer(Common),
    /// Score OUT/pred against OUT/data/test, write OUT/eval
    Eval(Common),
    /// Forward time and peak tracked bytes against planes per volume
    Bench {
        #[command(flatten)]
        common: Common,
        /// V1..V5 or cross_sa
        #[arg(long)]
        target: Option<String>,
        /// Comma-separated plane counts
        #[arg(long)]
        planes: Option<String>,
    },
    /// Analytic time/space terms
    Complexity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
        #[arg(short = 'b', long)]
        batch: Option<u128>,
        #[arg(short = 'm', long)]
        patches: Option<u128>,
        #[arg(short = 'n', long)]
        planes: Option<u128>,
        #[arg(short = 'd', long)]
        dim: Option<u128>,
    },
}

#[derive(Args)]
struct Common {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// key=value, applied after the config file; repeatable
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self, extra: &[(&str, Option<String>)]) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o)))?;
            cfg.set(k, v)?;
        }
        for (k, v) in extra {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn report(arts: &[Artifact]) {
    eprintln!("wrote {} artifacts", arts.len());
}

fn emit(common: &Common, name: &str, seed: u64, text: &str) -> Result<(), Error> {
    print!("{}", text);
    fs::create_dir_all(&common.out)?;
    let path = common.out.join(name);
    fs::write(&path, text)?;
    pipeline::update_manifest(&common.out, &[Artifact { kind: name.trim_end_matches(".tsv").into(), path, seed }])
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = c.load(&[])?;
            report(&pipeline::gen(&cfg, &c.out)?);
        }
        Command::Train(c) => {
            let cfg = c.load(&[])?;
            fs::create_dir_all(&c.out)?;
            fs::write(c.out.join("config.txt"), cfg.to_text())?;
            let r = pipeline::train(&cfg, &c.out, |e| {
                println!("epoch {}\tloss {:.6}\tval_acc {:.4}\tlr {:.4e}", e.epoch, e.loss, e.val_acc, e.lr);
            })?;
            println!("best epoch {}\tpos_weight {:.4}", r.best_epoch, r.pos_weight);
            report(&r.artifacts);
        }
        Command::Infer(c) => {
            let cfg = c.load(&[])?;
            report(&pipeline::infer(&cfg, &c.out)?);
        }
        Command::Eval(c) => {
            let cfg = c.load(&[])?;
            let (r, arts) = pipeline::eval(&cfg, &c.out)?;
            print!("{}", r.metrics_tsv());
            report(&arts);
        }
        Command::Bench { common, target, planes } => {
            let cfg = common.load(&[("bench_target", target), ("bench_planes", planes)])?;
            emit(&common, "bench.tsv", cfg.seed, &pipeline::bench(&cfg)?)?;
        }
        Command::Complexity {
            common,
            mode,
            batch,
            patches,
            planes,
            dim,
        } => {
            let s = |v: Option<u128>| v.map(|x| x.to_string());
            let cfg = common.load(&[
                ("complexity_mode", mode),
                ("complexity_batch", s(batch)),
                ("complexity_patches", s(patches)),
                ("complexity_planes", s(planes)),
                ("complexity_dim", s(dim)),
            ])?;
            emit(&common, "complexity.tsv", cfg.seed, &pipeline::complexity_report(&cfg)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
