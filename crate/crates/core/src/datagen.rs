//! Synthetic lesion volumes, the volume file format and plane-window sampling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::read_u32;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSVL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub seed: u64,
    pub count: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Lesion intensity above background, in (0, 1].
    pub contrast: f64,
    pub noise_sd: f64,
    /// Background intensity.
    pub base: f64,
    /// Semi-axis range in voxels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Up to three lesions per volume instead of exactly one.
    pub multi_lesion: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            seed: 0,
            count: 16,
            depth: 32,
            height: 32,
            width: 32,
            contrast: 0.4,
            noise_sd: 0.1,
            base: 0.3,
            radius_min: 3.0,
            radius_max: 8.0,
            multi_lesion: false,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::Config(format!("contrast {} outside (0, 1]", self.contrast)));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config(format!("noise_sd {} must be >= 0", self.noise_sd)));
        }
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("volume extents must be positive".into()));
        }
        if !(self.radius_min >= 1.0 && self.radius_min <= self.radius_max) {
            return Err(Error::Config("need 1 <= radius_min <= radius_max".into()));
        }
        Ok(())
    }
}

/// Oriented ellipsoid in voxel coordinates `(z, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub rotation: Matrix3<f64>,
}

impl Ellipsoid {
    pub fn axis_aligned(center: [f64; 3], radii: [f64; 3]) -> Self {
        Ellipsoid {
            center,
            radii,
            rotation: Matrix3::identity(),
        }
    }

    pub fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let d = Vector3::new(z - self.center[0], y - self.center[1], x - self.center[2]);
        let local = self.rotation.transpose() * d;
        (0..3).map(|i| (local[i] / self.radii[i]).powi(2)).sum::<f64>() <= 1.0
    }

    /// Sets every voxel centre inside the ellipsoid.
    pub fn rasterize(&self, dims: [usize; 3], mask: &mut [u8]) {
        let [zd, yd, xd] = dims;
        for z in 0..zd {
            for y in 0..yd {
                for x in 0..xd {
                    if self.contains(z as f64, y as f64, x as f64) {
                        mask[(z * yd + y) * xd + x] = 1;
                    }
                }
            }
        }
    }

    fn random<R: Rng + ?Sized>(p: &GenParams, rng: &mut R) -> Self {
        let radii = [0, 1, 2].map(|_| rng.random_range(p.radius_min..=p.radius_max));
        let dims = [p.depth, p.height, p.width];
        let center = [0, 1, 2].map(|i| rng.random_range(0.0..dims[i] as f64));
        let normal = Normal::new(0.0, 1.0).unwrap();
        let q = Quaternion::new(
            normal.sample(rng),
            normal.sample(rng),
            normal.sample(rng),
            normal.sample(rng),
        );
        let rotation = *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix();
        Ellipsoid {
            center,
            radii,
            rotation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVolume {
    /// `[Z, H, W]` intensities in `[0, 1]`.
    pub voxels: Tensor<f32>,
    /// Foreground flags, same layout as `voxels`.
    pub mask: Vec<u8>,
    /// One per plane: 1 iff the plane has any foreground.
    pub labels: Vec<u8>,
}

impl SyntheticVolume {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn depth(&self) -> usize {
        self.dims()[0]
    }

    pub fn plane_size(&self) -> usize {
        let [_, h, w] = self.dims();
        h * w
    }
}

/// Plane labels from a mask: 1 iff a plane holds any foreground.
pub fn slice_labels(mask: &[u8], depth: usize) -> Vec<u8> {
    let plane = mask.len() / depth.max(1);
    (0..depth)
        .map(|z| mask[z * plane..(z + 1) * plane].iter().any(|&m| m != 0) as u8)
        .collect()
}

/// Generates one volume from its own RNG stream.
pub fn generate_one(p: &GenParams, index: usize) -> SyntheticVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(index as u64);
    let dims = [p.depth, p.height, p.width];
    let n = p.depth * p.height * p.width;
    let lesions = if p.multi_lesion { rng.random_range(1..=3) } else { 1 };
    let mut mask = vec![0u8; n];
    for _ in 0..lesions {
        // redraw until the lesion lands inside the volume
        loop {
            let e = Ellipsoid::random(p, &mut rng);
            let mut m = vec![0u8; n];
            e.rasterize(dims, &mut m);
            if m.contains(&1) {
                mask.iter_mut().zip(&m).for_each(|(a, b)| *a |= b);
                break;
            }
        }
    }
    let fg = (p.base + p.contrast).clamp(0.0, 1.0);
    let noise = Normal::new(0.0, p.noise_sd.max(0.0)).unwrap();
    let voxels = mask
        .iter()
        .map(|&m| {
            let clean = if m != 0 { fg } else { p.base };
            let v = if p.noise_sd > 0.0 { clean + noise.sample(&mut rng) } else { clean };
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    SyntheticVolume {
        voxels: Tensor::new(&dims, voxels).expect("extents match"),
        labels: slice_labels(&mask, p.depth),
        mask,
    }
}

pub fn generate(p: &GenParams) -> Result<Vec<SyntheticVolume>> {
    p.validate()?;
    Ok((0..p.count).map(|i| generate_one(p, i)).collect())
}

pub fn write_volume<W: Write>(mut w: W, v: &SyntheticVolume) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in v.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for x in v.voxels.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(&v.mask)?;
    w.write_all(&v.labels)?;
    Ok(())
}

pub fn read_volume<R: Read>(mut r: R) -> Result<SyntheticVolume> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a volume file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported volume version {}", version)));
    }
    let dims = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?].map(|d| d as usize);
    let n = dims.iter().product::<usize>();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let voxels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut mask = vec![0u8; n];
    r.read_exact(&mut mask)?;
    let mut labels = vec![0u8; dims[0]];
    r.read_exact(&mut labels)?;
    Ok(SyntheticVolume {
        voxels: Tensor::new(&dims, voxels)?,
        mask,
        labels,
    })
}

pub fn save_volume(path: &Path, v: &SyntheticVolume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_volume(&mut w, v)?;
    w.flush()?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<SyntheticVolume> {
    read_volume(BufReader::new(File::open(path)?))
}

/// `N` contiguous planes starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub start: usize,
    /// `[N, H, W]`.
    pub planes: Tensor<f32>,
    pub labels: Vec<u8>,
}

pub fn window(v: &SyntheticVolume, start: usize, n: usize) -> Result<VolumeSample> {
    if start + n > v.depth() || n == 0 {
        return Err(Error::Data(format!(
            "window [{}, {}) outside a {}-plane volume",
            start,
            start + n,
            v.depth()
        )));
    }
    Ok(VolumeSample {
        start,
        planes: v.voxels.narrow(0, start, n)?,
        labels: v.labels[start..start + n].to_vec(),
    })
}

/// Random window for training, start uniform in `[0, Z-N]`.
pub fn sample_train<R: Rng + ?Sized>(v: &SyntheticVolume, n: usize, rng: &mut R) -> Result<VolumeSample> {
    if v.depth() < n || n == 0 {
        return Err(Error::Data(format!("volume has {} planes, need {}", v.depth(), n)));
    }
    let start = rng.random_range(0..=v.depth() - n);
    window(v, start, n)
}

/// Starts of the sequential inference windows; a short remainder is covered
/// by shifting the last window back to end at `Z`.
pub fn infer_starts(depth: usize, n: usize) -> Result<Vec<usize>> {
    if depth < n || n == 0 {
        return Err(Error::Data(format!("volume has {} planes, need {}", depth, n)));
    }
    let mut starts: Vec<usize> = (0..depth / n).map(|i| i * n).collect();
    if depth % n != 0 {
        starts.push(depth - n);
    }
    Ok(starts)
}

/// For each plane, the window (index into `infer_starts`) whose output is
/// kept and the offset inside it. Later windows win on overlap.
pub fn plane_owners(depth: usize, n: usize) -> Result<Vec<(usize, usize)>> {
    let starts = infer_starts(depth, n)?;
    let mut owners = vec![(0, 0); depth];
    for (w, &s) in starts.iter().enumerate() {
        for (off, owner) in owners[s..s + n].iter_mut().enumerate() {
            *owner = (w, off);
        }
    }
    Ok(owners)
}

pub fn sample_infer(v: &SyntheticVolume, n: usize) -> Result<Vec<VolumeSample>> {
    infer_starts(v.depth(), n)?
        .into_iter()
        .map(|s| window(v, s, n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64) -> GenParams {
        GenParams {
            seed,
            count: 3,
            depth: 12,
            height: 16,
            width: 16,
            radius_min: 2.0,
            radius_max: 4.0,
            ..GenParams::default()
        }
    }

    #[test]
    fn clean_volume_has_exact_levels() {
        let p = GenParams {
            noise_sd: 0.0,
            contrast: 1.0,
            ..small(1)
        };
        for v in generate(&p).unwrap() {
            for (x, &m) in v.voxels.data().iter().zip(&v.mask) {
                assert_eq!(*x, if m == 1 { 1.0 } else { 0.3f64 as f32 });
            }
        }
    }

    #[test]
    fn same_seed_same_volumes() {
        let a = generate(&small(5)).unwrap();
        let b = generate(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(&small(6)).unwrap());
        // volumes use independent streams
        assert_eq!(a[2], generate_one(&small(5), 2));
    }

    #[test]
    fn sphere_voxel_fraction() {
        let e = Ellipsoid::axis_aligned([15.5, 15.5, 15.5], [4.0, 4.0, 4.0]);
        let mut m = vec![0u8; 32 * 32 * 32];
        e.rasterize([32, 32, 32], &mut m);
        let frac = m.iter().filter(|&&x| x == 1).count() as f64 / 32768.0;
        let want = 4.0 / 3.0 * std::f64::consts::PI * 64.0 / 32768.0;
        assert!((frac / want - 1.0).abs() < 0.2, "{} vs {}", frac, want);
    }

    #[test]
    fn labels_follow_mask() {
        for v in generate(&GenParams { multi_lesion: true, ..small(7) }).unwrap() {
            let plane = v.plane_size();
            assert!(v.mask.contains(&1));
            for z in 0..v.depth() {
                let any = v.mask[z * plane..(z + 1) * plane].contains(&1);
                assert_eq!(v.labels[z] == 1, any);
            }
            assert!(v.voxels.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(generate(&GenParams { contrast: 0.0, ..small(0) }).is_err());
        assert!(generate(&GenParams { noise_sd: -1.0, ..small(0) }).is_err());
        assert!(generate(&GenParams { radius_min: 0.5, ..small(0) }).is_err());
    }

    #[test]
    fn file_round_trip() {
        let v = generate_one(&small(8), 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.tsvl");
        save_volume(&path, &v).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back, v);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"TSVL");
        assert_eq!(bytes.len(), 20 + 12 * 256 * 5 + 12);
        assert!(read_volume(&b"XXXX\x01\x00\x00\x00"[..]).is_err());
    }

    #[test]
    fn train_windows() {
        let v = generate_one(&small(9), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_train(&v, 12, &mut rng).unwrap().start, 0);
        }
        let s = sample_train(&v, 5, &mut rng).unwrap();
        assert_eq!(s.labels, v.labels[s.start..s.start + 5]);
        assert_eq!(s.planes, v.voxels.narrow(0, s.start, 5).unwrap());
        assert!(sample_train(&v, 13, &mut rng).is_err());
    }

    #[test]
    fn train_start_is_uniform() {
        let v = SyntheticVolume {
            voxels: Tensor::zeros(&[32, 1, 1]),
            mask: vec![0; 32],
            labels: vec![0; 32],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut counts = [0usize; 17];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_train(&v, 16, &mut rng).unwrap().start] += 1;
        }
        let expect = draws as f64 / 17.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 16 degrees of freedom, 0.999 quantile
        assert!(chi2 < 39.25, "chi2 {}", chi2);
    }

    #[test]
    fn inference_windows() {
        assert_eq!(infer_starts(32, 16).unwrap(), vec![0, 16]);
        assert_eq!(infer_starts(20, 16).unwrap(), vec![0, 4]);
        let owners = plane_owners(20, 16).unwrap();
        assert_eq!(owners[3], (0, 3));
        assert_eq!(owners[4], (1, 0));
        assert_eq!(owners[19], (1, 15));
        assert!(infer_starts(8, 16).is_err());
    }

    proptest! {
        #[test]
        fn every_plane_covered_once(depth in 1usize..80, n in 1usize..20) {
            prop_assume!(depth >= n);
            let starts = infer_starts(depth, n).unwrap();
            let owners = plane_owners(depth, n).unwrap();
            for (z, &(w, off)) in owners.iter().enumerate() {
                prop_assert_eq!(starts[w] + off, z);
            }
            prop_assert_eq!(*starts.last().unwrap() + n, depth);
        }
    }
}
