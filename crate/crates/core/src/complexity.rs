//! Analytic cost model of in-plane / cross-plane modeling and an empirical
//! harness that measures forward time and tracked peak bytes against the
//! number of planes per volume.
//!
//! Counters use the cost model's own constants: `4LD² + 2L²D` for
//! self-attention over `L` tokens and `128LD` for a selective scan with
//! expanded width `2D` and state size 16. They are not FLOP audits of this
//! implementation; measurements are only compared by scaling shape.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{CrossBranch, Model, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, ParamStore};
use crate::tensor::memory::MemoryScope;
use crate::tensor::{Tape, Tensor};
use crate::transformer::MultiHeadAttention;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    InSa,
    InSsm,
    CrossSa,
    CrossSsm,
    /// Cross-plane scan followed by in-plane attention.
    HybridLayer,
    /// Cross-plane attention followed by in-plane attention.
    CrossSaLayer,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::InSa,
        Mode::InSsm,
        Mode::CrossSa,
        Mode::CrossSsm,
        Mode::HybridLayer,
        Mode::CrossSaLayer,
    ];
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "in_sa" => Ok(Mode::InSa),
            "in_ssm" => Ok(Mode::InSsm),
            "cross_sa" => Ok(Mode::CrossSa),
            "cross_ssm" => Ok(Mode::CrossSsm),
            "hybrid_layer" => Ok(Mode::HybridLayer),
            "cross_sa_layer" => Ok(Mode::CrossSaLayer),
            _ => Err(Error::InvalidArgument(format!("unknown complexity mode {:?}", s))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::InSa => "in_SA",
            Mode::InSsm => "in_SSM",
            Mode::CrossSa => "cross_SA",
            Mode::CrossSsm => "cross_SSM",
            Mode::HybridLayer => "hybrid_layer",
            Mode::CrossSaLayer => "cross_sa_layer",
        })
    }
}

pub type Terms = Vec<(&'static str, u128)>;

fn check_positive(vals: &[u128]) -> Result<()> {
    if vals.iter().any(|&v| v == 0) {
        return Err(Error::InvalidArgument("sizes must be positive".into()));
    }
    Ok(())
}

fn in_sa(m: u128, d: u128) -> Terms {
    vec![("in_sa_linear", 4 * m * d * d), ("in_sa_pairwise", 2 * m * m * d)]
}

fn cross_sa(m: u128, n: u128, d: u128) -> Terms {
    vec![
        ("cross_sa_linear", 4 * m * n * d * d),
        ("cross_sa_pairwise", 2 * m * m * n * n * d),
    ]
}

/// Per-volume time terms for `M` patches per plane, `N` planes, width `D`.
pub fn time_terms(mode: Mode, m: u128, n: u128, d: u128) -> Result<Terms> {
    check_positive(&[m, n, d])?;
    Ok(match mode {
        Mode::InSa => in_sa(m, d),
        Mode::InSsm => vec![("in_ssm", 128 * m * d)],
        Mode::CrossSa => cross_sa(m, n, d),
        Mode::CrossSsm => vec![("cross_ssm", 128 * m * n * d)],
        Mode::HybridLayer => {
            let mut t = vec![("cross_ssm", 128 * m * n * d)];
            t.extend(in_sa(m, d));
            t
        }
        Mode::CrossSaLayer => {
            let mut t = cross_sa(m, n, d);
            t.extend(in_sa(m, d));
            t
        }
    })
}

pub fn time_complexity(mode: Mode, m: u128, n: u128, d: u128) -> Result<u128> {
    Ok(time_terms(mode, m, n, d)?.iter().map(|t| t.1).sum())
}

/// Space terms for a batch of `B` planes, i.e. `B/N` volumes. In-plane
/// terms scale with `B`, cross-plane terms with `B/N`.
pub fn space_terms(mode: Mode, b: u128, m: u128, n: u128, d: u128) -> Result<Terms> {
    check_positive(&[b, m, n, d])?;
    if b % n != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch of {} planes is not a whole number of {}-plane volumes",
            b, n
        )));
    }
    let volumes = b / n;
    let scale = |terms: Terms, k: u128| -> Terms { terms.into_iter().map(|(l, v)| (l, v * k)).collect() };
    Ok(match mode {
        Mode::InSa => scale(in_sa(m, d), b),
        Mode::InSsm => vec![("in_ssm", b * 128 * m * d)],
        Mode::CrossSa => scale(cross_sa(m, n, d), volumes),
        Mode::CrossSsm => vec![("cross_ssm", volumes * 128 * m * n * d)],
        Mode::HybridLayer => {
            let mut t = scale(in_sa(m, d), b);
            t.push(("cross_ssm", volumes * 128 * m * n * d));
            t
        }
        Mode::CrossSaLayer => {
            let mut t = scale(in_sa(m, d), b);
            t.extend(scale(cross_sa(m, n, d), volumes));
            t
        }
    })
}

pub fn space_complexity(mode: Mode, b: u128, m: u128, n: u128, d: u128) -> Result<u128> {
    Ok(space_terms(mode, b, m, n, d)?.iter().map(|t| t.1).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub mode: Mode,
    pub sizes: [u128; 4],
    pub time_terms: Terms,
    pub space_terms: Terms,
    pub time_total: u128,
    pub space_total: u128,
}

impl ComplexityReport {
    pub fn new(mode: Mode, b: u128, m: u128, n: u128, d: u128) -> Result<Self> {
        let time_terms = time_terms(mode, m, n, d)?;
        let space_terms = space_terms(mode, b, m, n, d)?;
        Ok(ComplexityReport {
            mode,
            sizes: [b, m, n, d],
            time_total: time_terms.iter().map(|t| t.1).sum(),
            space_total: space_terms.iter().map(|t| t.1).sum(),
            time_terms,
            space_terms,
        })
    }

    /// Tab-separated `section, label, value` rows.
    pub fn to_tsv(&self) -> String {
        let [b, m, n, d] = self.sizes;
        let mut s = format!("mode\t{}\nB\t{}\nM\t{}\nN\t{}\nD\t{}\n", self.mode, b, m, n, d);
        for (l, v) in &self.time_terms {
            s += &format!("time\t{}\t{}\n", l, v);
        }
        s += &format!("time\ttotal\t{}\n", self.time_total);
        for (l, v) in &self.space_terms {
            s += &format!("space\t{}\t{}\n", l, v);
        }
        s += &format!("space\ttotal\t{}\n", self.space_total);
        s
    }
}

/// Memory estimate for replacing the cross-plane scan with cross-plane
/// attention: the cross-plane attention space term alone.
pub fn cross_sa_memory_estimate(b: u128, m: u128, n: u128, d: u128) -> Result<u128> {
    space_complexity(Mode::CrossSa, b, m, n, d)
}

/// What a benchmark runs per volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchTarget {
    /// Full encoder forward of the given variant.
    Model(Variant),
    /// One pre-norm self-attention block over the interleaved patch tokens.
    CrossSaBlock,
}

impl FromStr for BenchTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cross_sa" | "cross_sa_block" => Ok(BenchTarget::CrossSaBlock),
            v => Ok(BenchTarget::Model(v.parse()?)),
        }
    }
}

impl fmt::Display for BenchTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchTarget::Model(v) => write!(f, "{}", v),
            BenchTarget::CrossSaBlock => f.write_str("cross_sa_block"),
        }
    }
}

/// Built model or block plus parameters for repeated timing runs.
pub struct Bench {
    target: BenchTarget,
    config: ModelConfig,
    model: Option<Model>,
    block: Option<CrossBranch>,
    store: ParamStore<f32>,
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchPoint {
    pub planes: usize,
    pub median_ns: f64,
    pub peak_bytes: usize,
}

impl Bench {
    /// `config.planes` is ignored; each measurement sets its own plane count.
    pub fn new(target: BenchTarget, config: &ModelConfig, seed: u64) -> Result<Self> {
        steady_allocator();
        let mut config = config.clone();
        match target {
            BenchTarget::Model(v) => {
                config.variant = v;
                let (model, store) = Model::new::<f32>(&config, seed)?;
                Ok(Bench {
                    target,
                    config,
                    model: Some(model),
                    block: None,
                    store,
                    seed,
                })
            }
            BenchTarget::CrossSaBlock => {
                config.validate()?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut store = ParamStore::new();
                let block = CrossBranch::Attention {
                    norm: LayerNorm::new(&mut store, "xattn.0.norm", config.dim),
                    attn: MultiHeadAttention::new(&mut store, "xattn.0.attn", config.dim, config.heads, &mut rng)?,
                };
                Ok(Bench {
                    target,
                    config,
                    model: None,
                    block: Some(block),
                    store,
                    seed,
                })
            }
        }
    }

    pub fn target(&self) -> BenchTarget {
        self.target
    }

    fn input(&self, planes: usize, volumes: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ planes as u64);
        let c = &self.config;
        match self.target {
            BenchTarget::Model(_) => Tensor::uniform(&[volumes * planes, c.height, c.width], 0.0, 1.0, &mut rng),
            BenchTarget::CrossSaBlock => Tensor::randn(&[volumes * planes, c.tokens(), c.dim], 1.0, &mut rng),
        }
    }

    /// One forward pass on a fresh tape. With `grad`, parameters require
    /// gradients, so the tape keeps what a training step would keep.
    fn run(&self, x: &Tensor<f32>, planes: usize, grad: bool) -> Result<()> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, grad);
        match (&self.model, &self.block) {
            (Some(model), _) => {
                let mut model = model.clone();
                model.config.planes = planes;
                let out = model.forward(&p, x)?;
                std::hint::black_box(out.y_patch.value());
            }
            (_, Some(block)) => {
                let y = block.forward(&p, tape.constant(x.clone()), planes)?;
                std::hint::black_box(y.value());
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    /// Median forward time of one `planes`-plane volume after one warm-up.
    pub fn time(&self, planes: usize, trials: usize) -> Result<f64> {
        Ok(self.times(&[planes], trials)?[0])
    }

    /// Median times for several plane counts. Trials go round-robin over
    /// `ns` so a slow stretch of the host lands on every point alike.
    pub fn times(&self, ns: &[usize], trials: usize) -> Result<Vec<f64>> {
        let xs: Vec<_> = ns.iter().map(|&n| self.input(n, 1)).collect();
        for (x, &n) in xs.iter().zip(ns) {
            self.run(x, n, false)?;
        }
        let mut times = vec![Vec::with_capacity(trials.max(1)); ns.len()];
        for _ in 0..trials.max(1) {
            for ((x, &n), t) in xs.iter().zip(ns).zip(times.iter_mut()) {
                let t0 = Instant::now();
                self.run(x, n, false)?;
                t.push(t0.elapsed().as_nanos() as f64);
            }
        }
        Ok(times.into_iter().map(median).collect())
    }

    /// Peak tracked bytes of a gradient-recording forward over
    /// `total_planes / planes` volumes.
    pub fn peak_bytes(&self, planes: usize, total_planes: usize) -> Result<usize> {
        if planes == 0 || total_planes % planes != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} planes is not a whole number of {}-plane volumes",
                total_planes, planes
            )));
        }
        let x = self.input(planes, total_planes / planes);
        let scope = MemoryScope::begin();
        self.run(&x, planes, true)?;
        Ok(scope.peak_bytes())
    }

    pub fn series(&self, ns: &[usize], trials: usize, total_planes: Option<usize>) -> Result<Vec<BenchPoint>> {
        let times = self.times(ns, trials)?;
        ns.iter()
            .zip(times)
            .map(|(&n, median_ns)| {
                Ok(BenchPoint {
                    planes: n,
                    median_ns,
                    peak_bytes: match total_planes {
                        Some(b) => self.peak_bytes(n, b)?,
                        None => 0,
                    },
                })
            })
            .collect()
    }
}

/// By default glibc serves blocks above 128 KiB with fresh mmaps, so every
/// large activation pays page faults and per-plane cost creeps up with the
/// plane count. Benchmarks keep such blocks on the heap instead.
fn steady_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        });
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Least-squares polynomial fit `c0 + c1·x + …`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub coeffs: Vec<f64>,
    pub r2: f64,
}

impl Fit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    /// Share of the fitted value at `x` coming from the highest-order term.
    pub fn top_term_share(&self, x: f64) -> f64 {
        let k = self.coeffs.len() - 1;
        (self.coeffs[k] * x.powi(k as i32)).abs() / self.eval(x).abs()
    }
}

pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Result<Fit> {
    if xs.len() != ys.len() || xs.len() <= degree {
        return Err(Error::InvalidArgument(format!(
            "need more than {} points for a degree-{} fit",
            degree, degree
        )));
    }
    let x = DMatrix::from_fn(xs.len(), degree + 1, |r, c| xs[r].powi(c as i32));
    let y = DVector::from_column_slice(ys);
    let coeffs = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let pred = &x * &coeffs;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_res: f64 = ys.iter().zip(pred.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|a| (a - mean).powi(2)).sum();
    Ok(Fit {
        coeffs: coeffs.iter().copied().collect(),
        r2: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 },
    })
}

/// Linear and quadratic fits of time against plane count.
pub fn fit_time(points: &[BenchPoint]) -> Result<(Fit, Fit)> {
    let xs: Vec<f64> = points.iter().map(|p| p.planes as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.median_ns).collect();
    Ok((polyfit(&xs, &ys, 1)?, polyfit(&xs, &ys, 2)?))
}

/// `N, time_ns, peak_bytes` rows followed by fit coefficients.
pub fn bench_tsv(target: BenchTarget, points: &[BenchPoint]) -> Result<String> {
    let mut s = format!("# target\t{}\nN\ttime_ns\tpeak_bytes\n", target);
    for p in points {
        s += &format!("{}\t{:.0}\t{}\n", p.planes, p.median_ns, p.peak_bytes);
    }
    if points.len() >= 3 {
        let (lin, quad) = fit_time(points)?;
        let top = points.iter().map(|p| p.planes).max().unwrap_or(1) as f64;
        s += &format!("fit_linear\t{:.6e}\t{:.6e}\tr2={:.6}\n", lin.coeffs[0], lin.coeffs[1], lin.r2);
        s += &format!(
            "fit_quadratic\t{:.6e}\t{:.6e}\t{:.6e}\tr2={:.6}\tquad_share_at_max={:.4}\n",
            quad.coeffs[0],
            quad.coeffs[1],
            quad.coeffs[2],
            quad.r2,
            quad.top_term_share(top)
        );
    }
    Ok(s)
}
