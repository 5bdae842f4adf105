//! File-based drivers behind the command line: dataset generation, training,
//! inference, evaluation, benchmarks and the artifact manifest.
//!
//! Everything lives under one output directory:
//!
//! ```text
//! data/{train,val,test}/vol_0000.tsvl   generated volumes
//! model/{final,best}.tsck, loss.tsv      training outputs
//! pred/vol_0000.tsvl                     maps (voxels) and masks
//! eval/metrics.tsv, per_volume.tsv       evaluation
//! manifest.tsv                           artifact, path, seed
//! ```

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::complexity::{self, Bench, BenchTarget, ComplexityReport, Mode};
use crate::datagen::{self, GenParams, SyntheticVolume};
use crate::encoder::{pos_weight, training_loss, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::localize::{self, Metrics};
use crate::nn::ParamStore;
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSource {
    /// Class-to-patch attention when the variant has attention, else patch CAM.
    Auto,
    C2p,
    PatchCam,
}

impl FromStr for MapSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(MapSource::Auto),
            "c2p" => Ok(MapSource::C2p),
            "cam" | "patch_cam" => Ok(MapSource::PatchCam),
            _ => Err(Error::Config(format!("unknown map source {:?}", s))),
        }
    }
}

impl std::fmt::Display for MapSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MapSource::Auto => "auto",
            MapSource::C2p => "c2p",
            MapSource::PatchCam => "cam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub depth: usize,
    pub contrast: f64,
    pub noise_sd: f64,
    pub base: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub multi_lesion: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GenParams::default();
        DataConfig {
            train_count: 100,
            val_count: 8,
            test_count: 20,
            depth: g.depth,
            contrast: g.contrast,
            noise_sd: g.noise_sd,
            base: g.base,
            radius_min: g.radius_min,
            radius_max: g.radius_max,
            multi_lesion: g.multi_lesion,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_volumes: usize,
    /// Z-score each volume's intensities before use.
    pub zscore: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.05,
            momentum: 0.9,
            batch_volumes: 16,
            zscore: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    pub map_source: MapSource,
    pub per_plane: bool,
    pub tau: f64,
    /// `best` or `final`.
    pub checkpoint: String,
    pub pgm: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            map_source: MapSource::Auto,
            per_plane: false,
            tau: 0.5,
            checkpoint: "best".into(),
            pgm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub target: BenchTarget,
    pub planes: Vec<usize>,
    pub trials: usize,
    /// Fixed plane count for memory runs; 0 skips them.
    pub total_planes: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            target: BenchTarget::Model(crate::encoder::Variant::V3),
            planes: vec![2, 4, 8, 16, 32],
            trials: 5,
            total_planes: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityConfig {
    pub mode: Mode,
    pub batch: u128,
    pub patches: u128,
    pub planes: u128,
    pub dim: u128,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        ComplexityConfig {
            mode: Mode::HybridLayer,
            batch: 256,
            patches: 196,
            planes: 16,
            dim: 384,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub bench: BenchConfig,
    pub complexity: ComplexityConfig,
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {:?} for {}", value, key)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value {:?} for {}", value, key))),
    }
}

impl PipelineConfig {
    /// Applies one setting; unknown keys are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if self.model.set(key, value)? {
            return Ok(());
        }
        let (d, t, i, b, c) = (
            &mut self.data,
            &mut self.train,
            &mut self.infer,
            &mut self.bench,
            &mut self.complexity,
        );
        match key {
            "seed" => self.seed = parse(key, value)?,
            "train_count" => d.train_count = parse(key, value)?,
            "val_count" => d.val_count = parse(key, value)?,
            "test_count" => d.test_count = parse(key, value)?,
            "depth" => d.depth = parse(key, value)?,
            "contrast" => d.contrast = parse(key, value)?,
            "noise_sd" => d.noise_sd = parse(key, value)?,
            "base" => d.base = parse(key, value)?,
            "radius_min" => d.radius_min = parse(key, value)?,
            "radius_max" => d.radius_max = parse(key, value)?,
            "multi_lesion" => d.multi_lesion = parse_bool(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "batch_volumes" => t.batch_volumes = parse(key, value)?,
            "zscore" => t.zscore = parse_bool(key, value)?,
            "map_source" => i.map_source = value.trim().parse()?,
            "per_plane" => i.per_plane = parse_bool(key, value)?,
            "tau" => i.tau = parse(key, value)?,
            "checkpoint" => i.checkpoint = value.trim().to_string(),
            "pgm" => i.pgm = parse_bool(key, value)?,
            "bench_target" => b.target = value.trim().parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "bench_planes" => {
                b.planes = value
                    .split(',')
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "bench_trials" => b.trials = parse(key, value)?,
            "bench_total_planes" => b.total_planes = parse(key, value)?,
            "complexity_mode" => c.mode = value.trim().parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "complexity_batch" => c.batch = parse(key, value)?,
            "complexity_patches" => c.patches = parse(key, value)?,
            "complexity_planes" => c.planes = parse(key, value)?,
            "complexity_dim" => c.dim = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {:?}", key))),
        }
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        Self::parse_text(&text)
    }

    pub fn to_text(&self) -> String {
        let (d, t, i, b, c) = (&self.data, &self.train, &self.infer, &self.bench, &self.complexity);
        let mut s = format!("seed = {}\n", self.seed);
        for (k, v) in self.model.entries() {
            writeln!(s, "{} = {}", k, v).unwrap();
        }
        let planes: Vec<String> = b.planes.iter().map(|n| n.to_string()).collect();
        let rest: Vec<(&str, String)> = vec![
            ("train_count", d.train_count.to_string()),
            ("val_count", d.val_count.to_string()),
            ("test_count", d.test_count.to_string()),
            ("depth", d.depth.to_string()),
            ("contrast", d.contrast.to_string()),
            ("noise_sd", d.noise_sd.to_string()),
            ("base", d.base.to_string()),
            ("radius_min", d.radius_min.to_string()),
            ("radius_max", d.radius_max.to_string()),
            ("multi_lesion", d.multi_lesion.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr", t.lr.to_string()),
            ("momentum", t.momentum.to_string()),
            ("batch_volumes", t.batch_volumes.to_string()),
            ("zscore", t.zscore.to_string()),
            ("map_source", i.map_source.to_string()),
            ("per_plane", i.per_plane.to_string()),
            ("tau", i.tau.to_string()),
            ("checkpoint", i.checkpoint.clone()),
            ("pgm", i.pgm.to_string()),
            ("bench_target", b.target.to_string()),
            ("bench_planes", planes.join(",")),
            ("bench_trials", b.trials.to_string()),
            ("bench_total_planes", b.total_planes.to_string()),
            ("complexity_mode", c.mode.to_string()),
            ("complexity_batch", c.batch.to_string()),
            ("complexity_patches", c.patches.to_string()),
            ("complexity_planes", c.planes.to_string()),
            ("complexity_dim", c.dim.to_string()),
        ];
        for (k, v) in rest {
            writeln!(s, "{} = {}", k, v).unwrap();
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gen_params(0).validate()?;
        let t = &self.train;
        if t.batch_volumes == 0 || !(t.lr > 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config("need batch_volumes > 0, lr > 0, 0 <= momentum < 1".into()));
        }
        if self.data.depth < self.model.planes {
            return Err(Error::Config(format!(
                "depth {} is shorter than {} planes per volume",
                self.data.depth, self.model.planes
            )));
        }
        if !matches!(self.infer.checkpoint.as_str(), "best" | "final") {
            return Err(Error::Config(format!("checkpoint must be best or final, got {:?}", self.infer.checkpoint)));
        }
        Ok(())
    }

    fn gen_params(&self, count: usize) -> GenParams {
        let d = &self.data;
        GenParams {
            seed: self.seed,
            count,
            depth: d.depth,
            height: self.model.height,
            width: self.model.width,
            contrast: d.contrast,
            noise_sd: d.noise_sd,
            base: d.base,
            radius_min: d.radius_min,
            radius_max: d.radius_max,
            multi_lesion: d.multi_lesion,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn split_dir(out: &Path, split: &str) -> PathBuf {
    out.join("data").join(split)
}

fn volume_name(i: usize) -> String {
    format!("vol_{:04}.tsvl", i)
}

fn data_err(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Data(format!("{}: {}", path.display(), io)),
        Error::Format(m) => Error::Data(format!("{}: {}", path.display(), m)),
        e => e,
    }
}

/// One artifact line of the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub kind: String,
    pub path: PathBuf,
    pub seed: u64,
}

impl Artifact {
    fn new(kind: &str, path: PathBuf, seed: u64) -> Self {
        Artifact {
            kind: kind.into(),
            path,
            seed,
        }
    }
}

/// Merges artifacts into `manifest.tsv`, replacing rows with the same path.
pub fn update_manifest(out: &Path, artifacts: &[Artifact]) -> Result<()> {
    let path = out.join("manifest.tsv");
    let mut rows: Vec<(String, String, String)> = Vec::new();
    if let Ok(text) = fs::read_to_string(&path) {
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() == 3 {
                rows.push((f[0].into(), f[1].into(), f[2].into()));
            }
        }
    }
    for a in artifacts {
        let rel = a.path.strip_prefix(out).unwrap_or(&a.path).display().to_string();
        rows.retain(|r| r.1 != rel);
        rows.push((a.kind.clone(), rel, a.seed.to_string()));
    }
    let mut s = String::from("artifact\tpath\tseed\n");
    for (k, p, seed) in rows {
        writeln!(s, "{}\t{}\t{}", k, p, seed).unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes the train, val and test volumes. Volume `i` of the whole set uses
/// RNG stream `i`, so splits never share a volume.
pub fn gen(cfg: &PipelineConfig, out: &Path) -> Result<Vec<Artifact>> {
    cfg.validate()?;
    let d = &cfg.data;
    let p = cfg.gen_params(d.train_count + d.val_count + d.test_count);
    let mut arts = Vec::new();
    let mut index = 0;
    for (split, count) in SPLITS.iter().zip([d.train_count, d.val_count, d.test_count]) {
        let dir = split_dir(out, split);
        fs::create_dir_all(&dir)?;
        for i in 0..count {
            let path = dir.join(volume_name(i));
            datagen::save_volume(&path, &datagen::generate_one(&p, index))?;
            arts.push(Artifact::new(&format!("volume.{}", split), path, cfg.seed));
            index += 1;
        }
    }
    update_manifest(out, &arts)?;
    Ok(arts)
}

/// Volumes of one split in file-name order.
pub fn load_split(out: &Path, split: &str) -> Result<Vec<(String, SyntheticVolume)>> {
    let dir = split_dir(out, split);
    let mut names: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::Data(format!("{}: {}", dir.display(), e)))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".tsvl"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let path = dir.join(&n);
            let v = datagen::load_volume(&path).map_err(|e| data_err(&path, e))?;
            Ok((n, v))
        })
        .collect()
}

/// Shifts and scales intensities to zero mean, unit variance over the
/// whole volume. A constant volume only loses its mean.
pub fn zscore(v: &SyntheticVolume) -> SyntheticVolume {
    let x = v.voxels.data();
    let n = x.len().max(1) as f64;
    let mean = x.iter().map(|&a| a as f64).sum::<f64>() / n;
    let var = x.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    SyntheticVolume {
        voxels: v.voxels.map(|a| ((a as f64 - mean) * inv) as f32),
        ..v.clone()
    }
}

fn prepare(cfg: &PipelineConfig, set: Vec<(String, SyntheticVolume)>) -> Vec<(String, SyntheticVolume)> {
    if !cfg.train.zscore {
        return set;
    }
    set.into_iter().map(|(n, v)| (n, zscore(&v))).collect()
}

/// Per-plane outputs of a whole volume assembled from inference windows.
#[derive(Debug, Clone)]
pub struct VolumeOutput {
    pub class_logits: Vec<f64>,
    pub patch_logits: Vec<f64>,
    /// Summed class-to-patch attention `[Z, M]`; `None` without attention.
    pub c2p: Option<Tensor<f64>>,
    /// Patch-branch conv outputs `[Z, M]`.
    pub cam: Tensor<f64>,
}

impl VolumeOutput {
    /// Plane is predicted positive when the mean of the two branch
    /// probabilities reaches one half.
    pub fn plane_predictions(&self) -> Vec<u8> {
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        self.class_logits
            .iter()
            .zip(&self.patch_logits)
            .map(|(&a, &b)| (0.5 * (sig(a) + sig(b)) >= 0.5) as u8)
            .collect()
    }

    pub fn scores(&self, source: MapSource) -> Result<&Tensor<f64>> {
        match (source, &self.c2p) {
            (MapSource::PatchCam, _) | (MapSource::Auto, None) => Ok(&self.cam),
            (_, Some(a)) => Ok(a),
            (MapSource::C2p, None) => Err(Error::Config(
                "variant has no attention; use map_source = cam".into(),
            )),
        }
    }
}

/// Runs every sequential window of `v` in one batch and keeps, for each
/// plane, the output of the window that owns it.
pub fn volume_forward(model: &Model, store: &ParamStore<f32>, v: &SyntheticVolume) -> Result<VolumeOutput> {
    let n = model.config.planes;
    let samples = datagen::sample_infer(v, n)?;
    let batch = crate::tensor::stack(&samples.iter().map(|s| s.planes.clone()).collect::<Vec<_>>())?;
    let s = batch.shape().to_vec();
    let batch = batch.reshape(&[s[0] * s[1], s[2], s[3]])?;
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let out = model.forward(&p, &batch)?;
    let m = model.config.patches();
    let owners = datagen::plane_owners(v.depth(), n)?;
    let rows: Vec<usize> = owners.iter().map(|&(w, off)| w * n + off).collect();
    let gather = |t: &Tensor<f64>| -> Tensor<f64> {
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in &rows {
            data.extend_from_slice(&t.data()[r * m..(r + 1) * m]);
        }
        Tensor::new(&[rows.len(), m], data).expect("gathered rows")
    };
    let pick = |t: &Tensor<f32>| -> Vec<f64> { rows.iter().map(|&r| t.data()[r] as f64).collect() };
    let c2p = if out.attention.is_empty() {
        None
    } else {
        Some(gather(&localize::c2p_aggregate(&out.attention, model.config.layers)?))
    };
    Ok(VolumeOutput {
        class_logits: pick(&out.y_class.value()),
        patch_logits: pick(&out.y_patch.value()),
        c2p,
        cam: gather(&out.patch_logits.cast()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub pos_weight: f64,
    pub artifacts: Vec<Artifact>,
}

/// Cosine decay from `lr` at step 0 towards 0 at `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    0.5 * lr * (1.0 + (PI * step as f64 / total.max(1) as f64).cos())
}

/// Slice-classification accuracy over every plane of every volume.
pub fn plane_accuracy(model: &Model, store: &ParamStore<f32>, volumes: &[(String, SyntheticVolume)]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (_, v) in volumes {
        let pred = volume_forward(model, store, v)?.plane_predictions();
        hit += pred.iter().zip(&v.labels).filter(|(a, b)| a == b).count();
        total += pred.len();
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

fn save_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), &store.to_entries())
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = Model::new::<f32>(config, 0)?;
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    let entries = read_checkpoint(BufReader::new(file)).map_err(|e| data_err(path, e))?;
    store.load_entries(&entries).map_err(|e| data_err(path, e))?;
    Ok((model, store))
}

/// SGD with momentum over randomly sampled `N`-plane windows. Calls
/// `on_epoch` after every epoch.
pub fn train(cfg: &PipelineConfig, out: &Path, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainReport> {
    cfg.validate()?;
    let train_set = prepare(cfg, load_split(out, "train")?);
    let val_set = prepare(cfg, load_split(out, "val")?);
    if train_set.is_empty() {
        return Err(Error::Data("no training volumes".into()));
    }
    let mc = &cfg.model;
    let (model, mut store) = Model::new::<f32>(mc, cfg.seed)?;
    let labels: Vec<u8> = train_set.iter().flat_map(|(_, v)| v.labels.iter().copied()).collect();
    let pw = pos_weight(&labels, mc.pos_weight_min, mc.pos_weight_max);

    let dir = out.join("model");
    fs::create_dir_all(&dir)?;
    let (final_path, best_path, log_path) = (dir.join("final.tsck"), dir.join("best.tsck"), dir.join("loss.tsv"));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let tc = &cfg.train;
    let steps_per_epoch = train_set.len().div_ceil(tc.batch_volumes);
    let total_steps = steps_per_epoch * tc.epochs;
    let mut velocity: Vec<Vec<f32>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
    let mut log = String::from("epoch\tloss\tval_acc\tlr\n");
    let mut epochs = Vec::with_capacity(tc.epochs);
    let (mut best_acc, mut best_epoch) = (f64::NEG_INFINITY, 0);
    let mut step = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = tc.lr;
        for chunk in order.chunks(tc.batch_volumes) {
            let mut planes = Vec::with_capacity(chunk.len());
            let mut batch_labels = Vec::with_capacity(chunk.len() * mc.planes);
            for &i in chunk {
                let s = datagen::sample_train(&train_set[i].1, mc.planes, &mut rng)?;
                batch_labels.extend_from_slice(&s.labels);
                planes.push(s.planes);
            }
            let x = crate::tensor::stack(&planes)?.reshape(&[chunk.len() * mc.planes, mc.height, mc.width])?;

            let tape = Tape::new();
            let p = store.bind(&tape, true);
            let fwd = model.forward(&p, &x)?;
            let loss = training_loss(fwd.y_class, fwd.y_patch, &batch_labels, pw)?;
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {} at epoch {} step {} (lr {:.4e})",
                    value, epoch, step, lr
                )));
            }
            let grads = tape.backward(loss)?;
            lr = cosine_lr(tc.lr, step, total_steps);
            let mu = tc.momentum as f32;
            let ids: Vec<_> = store.ids().collect();
            for (k, id) in ids.into_iter().enumerate() {
                let Some(g) = grads.get(p.var(id)) else { continue };
                if !g.all_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient for {} at epoch {} step {}",
                        store.name(id),
                        epoch,
                        step
                    )));
                }
                let vel = &mut velocity[k];
                for (v, &gi) in vel.iter_mut().zip(g.data()) {
                    *v = mu * *v + gi;
                }
                for (w, &v) in store.get_mut(id).data_mut().iter_mut().zip(vel.iter()) {
                    *w -= lr as f32 * v;
                }
            }
            loss_sum += value;
            step += 1;
        }
        let val_acc = if val_set.is_empty() {
            f64::NAN
        } else {
            plane_accuracy(&model, &store, &val_set)?
        };
        let entry = EpochLog {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            val_acc,
            lr,
        };
        writeln!(log, "{}\t{:.8}\t{:.6}\t{:.6e}", epoch, entry.loss, entry.val_acc, entry.lr).unwrap();
        // without a validation set the latest epoch counts as best
        if val_set.is_empty() || val_acc > best_acc {
            best_acc = val_acc;
            best_epoch = epoch;
            save_checkpoint(&best_path, &store)?;
        }
        on_epoch(&entry);
        epochs.push(entry);
    }
    if tc.epochs == 0 {
        save_checkpoint(&best_path, &store)?;
    }
    save_checkpoint(&final_path, &store)?;
    fs::write(&log_path, log)?;
    let artifacts = vec![
        Artifact::new("checkpoint.final", final_path, cfg.seed),
        Artifact::new("checkpoint.best", best_path, cfg.seed),
        Artifact::new("loss_log", log_path, cfg.seed),
    ];
    update_manifest(out, &artifacts)?;
    Ok(TrainReport {
        epochs,
        best_epoch,
        pos_weight: pw,
        artifacts,
    })
}

/// Normalised maps `[Z, H, W]` and thresholded mask of one volume.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub maps: Tensor<f64>,
    pub mask: Vec<u8>,
}

pub fn predict(model: &Model, store: &ParamStore<f32>, v: &SyntheticVolume, ic: &InferConfig) -> Result<Prediction> {
    let c = &model.config;
    let out = volume_forward(model, store, v)?;
    let maps = localize::upscale_normalize(out.scores(ic.map_source)?, c.height, c.width, ic.per_plane)?;
    let mask = localize::threshold_mask(&maps, ic.tau);
    Ok(Prediction { maps, mask })
}

/// Maps and masks for every test volume, written to `pred/`.
pub fn infer(cfg: &PipelineConfig, out: &Path) -> Result<Vec<Artifact>> {
    cfg.validate()?;
    let ckpt = out.join("model").join(format!("{}.tsck", cfg.infer.checkpoint));
    let (model, store) = load_checkpoint(&ckpt, &cfg.model)?;
    let dir = out.join("pred");
    fs::create_dir_all(&dir)?;
    let mut arts = Vec::new();
    for (name, v) in prepare(cfg, load_split(out, "test")?) {
        let pred = predict(&model, &store, &v, &cfg.infer)?;
        let [z, h, w] = v.dims();
        let path = dir.join(&name);
        let saved = SyntheticVolume {
            voxels: pred.maps.cast(),
            labels: datagen::slice_labels(&pred.mask, z),
            mask: pred.mask,
        };
        datagen::save_volume(&path, &saved)?;
        arts.push(Artifact::new("prediction", path, cfg.seed));
        if cfg.infer.pgm {
            let pgm_dir = dir.join("maps").join(name.trim_end_matches(".tsvl"));
            fs::create_dir_all(&pgm_dir)?;
            for zi in 0..z {
                let plane = &pred.maps.data()[zi * h * w..(zi + 1) * h * w];
                localize::write_pgm(&pgm_dir.join(format!("z{:03}.pgm", zi)), plane, h, w)?;
            }
        }
    }
    update_manifest(out, &arts)?;
    Ok(arts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_volume: Vec<(String, Metrics)>,
    pub mean: Metrics,
}

impl EvalReport {
    pub fn metrics_tsv(&self) -> String {
        localize::format_metrics(&[
            ("dsc".into(), self.mean.dsc),
            ("hd95".into(), self.mean.hd95),
            ("iou".into(), self.mean.iou),
            ("volumes".into(), self.per_volume.len() as f64),
        ])
    }

    pub fn per_volume_tsv(&self) -> String {
        let mut s = String::from("volume\tdsc\thd95\tiou\n");
        for (n, m) in &self.per_volume {
            writeln!(s, "{}\t{}\t{}\t{}", n, m.dsc, m.hd95, m.iou).unwrap();
        }
        s
    }
}

/// Scores each predicted mask against the truth volume of the same name.
pub fn evaluate(pred: &[(String, SyntheticVolume)], truth: &[(String, SyntheticVolume)]) -> Result<EvalReport> {
    if pred.is_empty() {
        return Err(Error::Data("no predictions to evaluate".into()));
    }
    let mut per_volume = Vec::with_capacity(pred.len());
    for (name, p) in pred {
        let (_, t) = truth
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Data(format!("no ground truth for {}", name)))?;
        if p.dims() != t.dims() {
            return Err(Error::Data(format!(
                "{}: prediction {:?} vs truth {:?}",
                name,
                p.dims(),
                t.dims()
            )));
        }
        let m = localize::metrics(&p.mask, &t.mask, t.dims()).map_err(|e| Error::Data(e.to_string()))?;
        per_volume.push((name.clone(), m));
    }
    let k = per_volume.len() as f64;
    let sum = |f: fn(&Metrics) -> f64| per_volume.iter().map(|(_, m)| f(m)).sum::<f64>() / k;
    let mean = Metrics {
        dsc: sum(|m| m.dsc),
        hd95: sum(|m| m.hd95),
        iou: sum(|m| m.iou),
    };
    Ok(EvalReport { per_volume, mean })
}

pub fn eval(cfg: &PipelineConfig, out: &Path) -> Result<(EvalReport, Vec<Artifact>)> {
    let pred_dir = out.join("pred");
    let mut pred = Vec::new();
    let mut names: Vec<String> = fs::read_dir(&pred_dir)
        .map_err(|e| Error::Data(format!("{}: {}", pred_dir.display(), e)))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".tsvl"))
        .collect();
    names.sort();
    for n in names {
        let path = pred_dir.join(&n);
        pred.push((n, datagen::load_volume(&path).map_err(|e| data_err(&path, e))?));
    }
    let report = evaluate(&pred, &load_split(out, "test")?)?;
    let dir = out.join("eval");
    fs::create_dir_all(&dir)?;
    let (m, pv) = (dir.join("metrics.tsv"), dir.join("per_volume.tsv"));
    fs::write(&m, report.metrics_tsv())?;
    fs::write(&pv, report.per_volume_tsv())?;
    let arts = vec![Artifact::new("metrics", m, cfg.seed), Artifact::new("metrics.per_volume", pv, cfg.seed)];
    update_manifest(out, &arts)?;
    Ok((report, arts))
}

/// Time and optional memory series for the configured target, as TSV.
pub fn bench(cfg: &PipelineConfig) -> Result<String> {
    let b = &cfg.bench;
    let bench = Bench::new(b.target, &cfg.model, cfg.seed)?;
    let total = (b.total_planes > 0).then_some(b.total_planes);
    let points = bench.series(&b.planes, b.trials.max(1), total)?;
    complexity::bench_tsv(b.target, &points)
}

/// Term breakdown for the configured sizes plus the cross-plane attention
/// memory estimate against the scan-based layer.
pub fn complexity_report(cfg: &PipelineConfig) -> Result<String> {
    let c = &cfg.complexity;
    let r = ComplexityReport::new(c.mode, c.batch, c.patches, c.planes, c.dim)?;
    let scan = complexity::space_complexity(Mode::HybridLayer, c.batch, c.patches, c.planes, c.dim)?;
    let sa = complexity::cross_sa_memory_estimate(c.batch, c.patches, c.planes, c.dim)?;
    let mut s = r.to_tsv();
    writeln!(s, "estimate\tcross_sa_space\t{}", sa).unwrap();
    writeln!(s, "estimate\thybrid_layer_space\t{}", scan).unwrap();
    writeln!(s, "estimate\tratio\t{:.4}", sa as f64 / scan as f64).unwrap();
    Ok(s)
}
