//! Localization maps from class-to-patch attention or patch-branch logits,
//! binary masks, and overlap / surface-distance metrics.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::transformer::AttentionRecord;

/// Per plane, the class-token row restricted to patch columns, summed over
/// layers in layer order. Returns `[N, M]`.
pub fn c2p_aggregate<T: Float>(records: &[AttentionRecord<T>], layers: usize) -> Result<Tensor<f64>> {
    if records.len() != layers || layers == 0 {
        return Err(Error::InvalidArgument(format!(
            "expected attention from {} layers, got {}",
            layers,
            records.len()
        )));
    }
    let (n, t) = (records[0].planes(), records[0].tokens());
    let m = t - 1;
    let mut out = vec![0.0; n * m];
    for (l, rec) in records.iter().enumerate() {
        if rec.layer != l || rec.maps.shape() != [n, t, t] {
            return Err(Error::InvalidArgument(format!(
                "record {} is layer {} with shape {:?}",
                l,
                rec.layer,
                rec.maps.shape()
            )));
        }
        let data = rec.maps.data();
        for plane in 0..n {
            let row = &data[plane * t * t + 1..plane * t * t + t];
            for (o, v) in out[plane * m..(plane + 1) * m].iter_mut().zip(row) {
                *o += v.as_f64();
            }
        }
    }
    Tensor::new(&[n, m], out)
}

/// Bilinear resize with half-pixel centres; samples outside the source grid
/// clamp to the border.
pub fn bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |d: usize, s: usize, dn: usize| -> (usize, usize, f64) {
        let x = ((d as f64 + 0.5) * s as f64 / dn as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Min-max scales to `[0, 1]`; a constant input maps to all zeros.
pub fn min_max(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// `[N, M]` patch scores → `[N, H, W]` maps in `[0, 1]`. Normalization is
/// over the whole volume unless `per_plane` is set.
pub fn upscale_normalize(scores: &Tensor<f64>, height: usize, width: usize, per_plane: bool) -> Result<Tensor<f64>> {
    let s = scores.shape();
    if s.len() != 2 {
        return Err(Error::shape("upscale_normalize", format!("expected [N, M], got {:?}", s)));
    }
    let (n, m) = (s[0], s[1]);
    let g = (m as f64).sqrt().round() as usize;
    if g * g != m || m == 0 {
        return Err(Error::shape("upscale_normalize", format!("{} patches is not a square grid", m)));
    }
    let plane = height * width;
    let mut out = Vec::with_capacity(n * plane);
    for z in 0..n {
        let mut up = bilinear(&scores.data()[z * m..(z + 1) * m], g, g, height, width);
        if per_plane {
            min_max(&mut up);
        }
        out.extend(up);
    }
    if !per_plane {
        min_max(&mut out);
    }
    Tensor::new(&[n, height, width], out)
}

/// Patch-branch logits `[N, M]` take the same path as attention maps.
pub fn patch_cam(conv_out: &Tensor<f64>, height: usize, width: usize, per_plane: bool) -> Result<Tensor<f64>> {
    upscale_normalize(conv_out, height, width, per_plane)
}

pub fn threshold_mask(maps: &Tensor<f64>, tau: f64) -> Vec<u8> {
    maps.data().iter().map(|&v| (v >= tau) as u8).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub dsc: f64,
    pub hd95: f64,
    pub iou: f64,
}

pub fn dice(pred: &[u8], truth: &[u8]) -> f64 {
    let (mut both, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (a, b) = (a != 0, b != 0);
        both += (a && b) as usize;
        p += a as usize;
        t += b as usize;
    }
    if p + t == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + t) as f64
    }
}

/// Plane-wise IoU averaged over planes where either mask has foreground.
pub fn mean_plane_iou(pred: &[u8], truth: &[u8], plane: usize) -> f64 {
    let (mut total, mut counted) = (0.0, 0usize);
    for (pp, tt) in pred.chunks(plane).zip(truth.chunks(plane)) {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in pp.iter().zip(tt) {
            inter += (a != 0 && b != 0) as usize;
            union += (a != 0 || b != 0) as usize;
        }
        if union > 0 {
            total += inter as f64 / union as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        1.0
    } else {
        total / counted as f64
    }
}

/// Foreground voxels with a background or out-of-volume 6-neighbour.
pub fn surface(mask: &[u8], dims: [usize; 3]) -> Vec<u8> {
    let [zd, yd, xd] = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * yd + y) * xd + x] != 0;
    let mut out = vec![0u8; mask.len()];
    for z in 0..zd {
        for y in 0..yd {
            for x in 0..xd {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == zd
                    || y + 1 == yd
                    || x + 1 == xd
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
                out[(z * yd + y) * xd + x] = edge as u8;
            }
        }
    }
    out
}

const FAR: f64 = 1e18;

/// One pass of the lower-envelope distance transform over a strided line.
fn edt_line(f: &mut [f64], start: usize, stride: usize, n: usize, buf: &mut EdtBuf) {
    for i in 0..n {
        buf.g[i] = f[start + i * stride];
    }
    let (v, z, g) = (&mut buf.v, &mut buf.z, &buf.g);
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if g[q] >= FAR {
            continue;
        }
        if g[v[0]] >= FAR {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((g[q] + (q * q) as f64) - (g[p] + (p * p) as f64)) / (2 * q - 2 * p) as f64;
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if g[v[0]] >= FAR {
        return;
    }
    let mut j = 0;
    for q in 0..n {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        f[start + q * stride] = g[v[j]] + d * d;
    }
}

struct EdtBuf {
    g: Vec<f64>,
    v: Vec<usize>,
    z: Vec<f64>,
}

/// Exact squared Euclidean distance from every voxel to the nearest site.
pub fn squared_edt(sites: &[u8], dims: [usize; 3]) -> Vec<f64> {
    let [zd, yd, xd] = dims;
    let mut f: Vec<f64> = sites.iter().map(|&s| if s != 0 { 0.0 } else { FAR }).collect();
    let longest = zd.max(yd).max(xd);
    let mut buf = EdtBuf {
        g: vec![0.0; longest],
        v: vec![0; longest],
        z: vec![0.0; longest + 1],
    };
    for z in 0..zd {
        for y in 0..yd {
            edt_line(&mut f, (z * yd + y) * xd, 1, xd, &mut buf);
        }
    }
    for z in 0..zd {
        for x in 0..xd {
            edt_line(&mut f, z * yd * xd + x, xd, yd, &mut buf);
        }
    }
    for y in 0..yd {
        for x in 0..xd {
            edt_line(&mut f, y * xd + x, yd * xd, zd, &mut buf);
        }
    }
    f
}

/// Linear-interpolation percentile of unsorted values, `q` in `[0, 100]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// 95th percentile of the pooled surface-to-surface distances in both
/// directions, unit voxel spacing.
pub fn hd95(pred: &[u8], truth: &[u8], dims: [usize; 3]) -> f64 {
    let (sp, st) = (surface(pred, dims), surface(truth, dims));
    let (dp, dt) = (squared_edt(&sp, dims), squared_edt(&st, dims));
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pred.len() {
        if sp[i] != 0 {
            d.push(dt[i].sqrt());
        }
        if st[i] != 0 {
            d.push(dp[i].sqrt());
        }
    }
    percentile(&mut d, 95.0)
}

/// Length of the volume diagonal, reported as HD95 when exactly one mask
/// is empty.
pub fn diagonal(dims: [usize; 3]) -> f64 {
    dims.iter().map(|&d| (d * d) as f64).sum::<f64>().sqrt()
}

/// DSC and HD95 in 3-D, IoU per plane.
pub fn metrics(pred: &[u8], truth: &[u8], dims: [usize; 3]) -> Result<Metrics> {
    let n: usize = dims.iter().product();
    if pred.len() != n || truth.len() != n {
        return Err(Error::shape(
            "metrics",
            format!("masks of {} and {} voxels for dims {:?}", pred.len(), truth.len(), dims),
        ));
    }
    let (p_any, t_any) = (pred.iter().any(|&v| v != 0), truth.iter().any(|&v| v != 0));
    let hd = match (p_any, t_any) {
        (false, false) => 0.0,
        (true, true) => hd95(pred, truth, dims),
        _ => diagonal(dims),
    };
    Ok(Metrics {
        dsc: dice(pred, truth),
        hd95: hd,
        iou: mean_plane_iou(pred, truth, dims[1] * dims[2]),
    })
}

/// `name<TAB>value` lines.
pub fn format_metrics(rows: &[(String, f64)]) -> String {
    let mut s = String::new();
    for (name, value) in rows {
        writeln!(s, "{}\t{}", name, value).unwrap();
    }
    s
}

/// Writes one `[0, 1]` plane as an 8-bit binary PGM.
pub fn write_pgm(path: &Path, plane: &[f64], height: usize, width: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", width, height)?;
    let bytes: Vec<u8> = plane
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(layer: usize, maps: Tensor<f64>) -> AttentionRecord<f64> {
        AttentionRecord { layer, maps }
    }

    #[test]
    fn c2p_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f64>::uniform(&[2, 5, 5], 0.0, 1.0, &mut rng);
        let one = c2p_aggregate(&[record(0, a.clone())], 1).unwrap();
        for n in 0..2 {
            for m in 0..4 {
                assert_eq!(one.get(&[n, m]), a.get(&[n, 0, m + 1]));
            }
        }

        let uniform = Tensor::full(&[2, 5, 5], 0.2);
        let recs: Vec<_> = (0..3).map(|l| record(l, uniform.clone())).collect();
        let sum = c2p_aggregate(&recs, 3).unwrap();
        assert!(sum.data().iter().all(|&v| (v - 0.6).abs() < 1e-12));

        let b = Tensor::<f64>::uniform(&[2, 5, 5], 0.0, 1.0, &mut rng);
        let two = c2p_aggregate(&[record(0, a.clone()), record(1, b.clone())], 2).unwrap();
        for n in 0..2 {
            for m in 0..4 {
                assert_eq!(two.get(&[n, m]), a.get(&[n, 0, m + 1]) + b.get(&[n, 0, m + 1]));
            }
        }
        assert!(c2p_aggregate(&[record(0, a.clone())], 2).is_err());
        assert!(c2p_aggregate(&[record(1, a), record(0, b)], 2).is_err());
    }

    #[test]
    fn bilinear_centre_of_two_by_two() {
        let up = bilinear(&[0.0, 0.0, 0.0, 1.0], 2, 2, 3, 3);
        assert!((up[4] - 0.25).abs() < 1e-12);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[8], 1.0);
        // same size is the identity
        let src = [0.1, 0.7, 0.3, 0.9];
        assert_eq!(bilinear(&src, 2, 2, 2, 2), src.to_vec());
    }

    #[test]
    fn normalization_contract() {
        let flat = Tensor::full(&[2, 4], 3.0);
        let maps = upscale_normalize(&flat, 8, 8, false).unwrap();
        assert!(maps.data().iter().all(|&v| v == 0.0));
        assert!(threshold_mask(&maps, 0.5).iter().all(|&v| v == 0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::<f64>::uniform(&[3, 16], -2.0, 5.0, &mut rng);
        let maps = upscale_normalize(&s, 32, 32, false).unwrap();
        assert_eq!(maps.shape(), &[3, 32, 32]);
        assert_eq!(maps.min(), 0.0);
        assert_eq!(maps.max(), 1.0);
        let per = patch_cam(&s, 32, 32, true).unwrap();
        for z in 0..3 {
            let p = per.narrow(0, z, 1).unwrap();
            assert_eq!((p.min(), p.max()), (0.0, 1.0));
        }
        assert!(upscale_normalize(&Tensor::zeros(&[1, 6]), 4, 4, false).is_err());
    }

    #[test]
    fn threshold_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Tensor::<f64>::uniform(&[2, 4, 4], 0.0, 1.0, &mut rng);
        let mask = threshold_mask(&m, 0.5);
        for i in 0..32 {
            assert_eq!(mask[i] == 1, m.data()[i] >= 0.5);
        }
    }

    #[test]
    fn metric_examples() {
        let dims = [1, 4, 4];
        let mut a = vec![0u8; 16];
        for i in [5, 6, 9, 10] {
            a[i] = 1;
        }
        let m = metrics(&a, &a, dims).unwrap();
        assert_eq!((m.dsc, m.hd95, m.iou), (1.0, 0.0, 1.0));

        let mut half = vec![0u8; 16];
        half[5] = 1;
        half[6] = 1;
        let m = metrics(&a, &half, dims).unwrap();
        assert!((m.dsc - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.iou - 0.5).abs() < 1e-12);

        let mut far = vec![0u8; 16];
        far[0] = 1;
        let m = metrics(&half, &far, dims).unwrap();
        assert_eq!((m.dsc, m.iou), (0.0, 0.0));

        let empty = vec![0u8; 16];
        assert_eq!(metrics(&empty, &empty, dims).unwrap(), Metrics { dsc: 1.0, hd95: 0.0, iou: 1.0 });
        let m = metrics(&empty, &a, dims).unwrap();
        assert_eq!((m.dsc, m.iou), (0.0, 0.0));
        assert_eq!(m.hd95, diagonal(dims));
        assert!(metrics(&a, &a[..8], dims).is_err());
    }

    /// Brute-force surface distances over all pairs.
    fn hd95_brute(pred: &[u8], truth: &[u8], dims: [usize; 3]) -> f64 {
        let coords = |m: &[u8]| -> Vec<[f64; 3]> {
            let s = surface(m, dims);
            (0..m.len())
                .filter(|&i| s[i] != 0)
                .map(|i| {
                    let x = i % dims[2];
                    let y = (i / dims[2]) % dims[1];
                    let z = i / (dims[1] * dims[2]);
                    [z as f64, y as f64, x as f64]
                })
                .collect()
        };
        let (a, b) = (coords(pred), coords(truth));
        let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
            set.iter()
                .map(|q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        };
        let mut d: Vec<f64> = Vec::new();
        let mut ia = 0;
        let mut ib = 0;
        // same pooling order as the fast path: voxel index order
        for i in 0..pred.len() {
            let (sa, sb) = (surface(pred, dims)[i] != 0, surface(truth, dims)[i] != 0);
            if sa {
                d.push(nearest(&a[ia], &b));
                ia += 1;
            }
            if sb {
                d.push(nearest(&b[ib], &a));
                ib += 1;
            }
        }
        d.sort_by(f64::total_cmp);
        let pos = 0.95 * (d.len() - 1) as f64;
        let lo = pos.floor() as usize;
        d[lo] + (d[pos.ceil() as usize] - d[lo]) * (pos - lo as f64)
    }

    #[test]
    fn hd95_of_translated_cubes() {
        let dims = [8, 8, 8];
        let cube = |o: usize| {
            let mut m = vec![0u8; 512];
            for z in o..o + 3 {
                for y in o..o + 3 {
                    for x in o..o + 3 {
                        m[(z * 8 + y) * 8 + x] = 1;
                    }
                }
            }
            m
        };
        let (a, b) = (cube(1), cube(3));
        assert_eq!(hd95(&a, &b, dims), hd95_brute(&a, &b, dims));
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [5, 7, 6];
        let sites: Vec<u8> = (0..210).map(|_| rng.random_bool(0.05) as u8).collect();
        let fast = squared_edt(&sites, dims);
        for i in 0..210 {
            let p = [i / 42, (i / 6) % 7, i % 6];
            let best = (0..210)
                .filter(|&j| sites[j] != 0)
                .map(|j| {
                    let q = [j / 42, (j / 6) % 7, j % 6];
                    (0..3).map(|k| (p[k] as f64 - q[k] as f64).powi(2)).sum::<f64>()
                })
                .fold(FAR, f64::min);
            assert_eq!(fast[i], best);
        }
    }

    fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<u8> {
        (0..n).map(|_| rng.random_bool(p) as u8).collect()
    }

    proptest! {
        #[test]
        fn metric_properties(seed in any::<u64>(), d in 2usize..7, p in 0.05f64..0.6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [d, d + 1, d];
            let n = d * (d + 1) * d;
            let a = random_mask(&mut rng, n, p);
            let b = random_mask(&mut rng, n, p);
            let ab = metrics(&a, &b, dims).unwrap();
            let ba = metrics(&b, &a, dims).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab.dsc) && (0.0..=1.0).contains(&ab.iou));
            if a.contains(&1) && b.contains(&1) {
                prop_assert_eq!(ab.hd95, hd95_brute(&a, &b, dims));
            }
            // adding true positives never lowers dice
            let mut grown = a.clone();
            if let Some(i) = (0..n).find(|&i| b[i] == 1 && a[i] == 0) {
                grown[i] = 1;
                prop_assert!(dice(&grown, &b) >= dice(&a, &b));
            }
        }
    }

    #[test]
    fn metrics_text_and_pgm() {
        let s = format_metrics(&[("dsc".into(), 0.5), ("hd95".into(), 2.0)]);
        assert_eq!(s, "dsc\t0.5\nhd95\t2\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pgm");
        write_pgm(&path, &[0.0, 1.0, 0.5, 0.25], 2, 2).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 255, 128, 64]);
    }
}
