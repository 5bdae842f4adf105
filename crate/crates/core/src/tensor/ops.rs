//! Differentiable operations on [`Var`].

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, inverse_axes, permute};
use super::{numel, Float, Tensor, Var};
use crate::error::{Error, Result};

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("{:?} does not broadcast onto {:?}", b, a),
        ))
    }
}

/// Sums `g` down to `shape`, where `shape` is a suffix of `g`'s shape.
fn reduce_to<T: Float>(g: &[T], shape: &[usize]) -> Tensor<T> {
    let n = numel(shape);
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Float>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy)]
struct ConvGeom {
    bsz: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    /// Visits every (output pixel, source pixel, kernel tap) triple whose
    /// source lies inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = self.k / 2;
        for bi in 0..self.bsz {
            for i in 0..self.h {
                for j in 0..self.w {
                    let out_px = (bi * self.h + i) * self.w + j;
                    for di in 0..self.k {
                        let Some(si) = (i + di).checked_sub(pad).filter(|&v| v < self.h) else {
                            continue;
                        };
                        for dj in 0..self.k {
                            let Some(sj) = (j + dj).checked_sub(pad).filter(|&v| v < self.w) else {
                                continue;
                            };
                            f(out_px, (bi * self.h + si) * self.w + sj, di * self.k + dj);
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Float> Var<'t, T> {
    fn binary(
        self,
        rhs: Var<'t, T>,
        op: &'static str,
        f: fn(T, T) -> T,
        // (g, a, b) -> (da, db)
        df: fn(T, T, T) -> (T, T),
    ) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = rhs.value();
        suffix_broadcast(op, a.shape(), b.shape())?;
        let nb = b.numel();
        let data: Vec<T> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % nb]))
            .collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.tape.record(
            out,
            &[self, rhs],
            Box::new(move |g, inputs, _, needs| {
                let (a, b) = (inputs[0], inputs[1]);
                let nb = b.numel();
                let mut ga = needs[0].then(|| Vec::with_capacity(a.numel()));
                let mut gb_full = needs[1].then(|| Vec::with_capacity(a.numel()));
                for (i, (&gv, &av)) in g.data().iter().zip(a.data()).enumerate() {
                    let (da, db) = df(gv, av, b.data()[i % nb]);
                    if let Some(v) = ga.as_mut() {
                        v.push(da);
                    }
                    if let Some(v) = gb_full.as_mut() {
                        v.push(db);
                    }
                }
                vec![
                    ga.map(|v| Tensor::from_parts(a.shape().to_vec(), v)),
                    gb_full.map(|v| reduce_to(&v, b.shape())),
                ]
            }),
        ))
    }

    /// Elementwise sum; `rhs` may be a trailing-suffix broadcast of `self`.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "add", |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "sub", |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "mul", |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    fn unary(self, f: fn(T) -> T, df: fn(T, T) -> T) -> Var<'t, T> {
        let out = self.value().map(f);
        self.tape.record(
            out,
            &[self],
            Box::new(move |g, inputs, y, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(inputs[0].data())
                    .zip(y.data())
                    .map(|((&gv, &x), &yv)| gv * df(x, yv))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
            }),
        )
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'t, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(
            |x| {
                let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
                T::of(0.5) * x * (T::one() + inner.tanh())
            },
            |x, _| {
                let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
                let t = inner.tanh();
                let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
                T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
            },
        )
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| x * c);
        self.tape.record(
            out,
            &[self],
            Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * c))]),
        )
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| x + c);
        self.tape
            .record(out, &[self], Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.record(
            out,
            &[self],
            Box::new(|g, inputs, _, _| vec![Some(Tensor::full(inputs[0].shape(), g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::of(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Sum over one axis; the axis is removed.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {} of {:?}", axis, shape)));
        }
        let outer = numel(&shape[..axis]);
        let dim = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.tape.record(
            Tensor::from_parts(out_shape, out),
            &[self],
            Box::new(move |g, _, _, _| {
                let mut gx = Vec::with_capacity(outer * dim * inner);
                for o in 0..outer {
                    for _ in 0..dim {
                        gx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            }),
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let dim = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {}", axis)))?;
        Ok(self.sum_axis(axis)?.scale(T::one() / T::of(dim as f64)))
    }

    /// Batched matrix product. `rhs` is either rank 2 (shared across the
    /// batch of `self`) or carries the same batch extents as `self`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("rank < 2: {:?} x {:?}", sa, sb)));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", sa, sb),
            ));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_rhs = batch_b.is_empty();
        if !shared_rhs && batch_a != batch_b {
            return Err(Error::shape(
                "matmul",
                format!("batch extents differ: {:?} x {:?}", sa, sb),
            ));
        }
        let batch = numel(batch_a);
        let mut out = vec![T::zero(); batch * p * r];
        if shared_rhs {
            gemm_nn(a.data(), b.data(), &mut out, batch * p, q, r);
        } else {
            for i in 0..batch {
                gemm_nn(
                    &a.data()[i * p * q..(i + 1) * p * q],
                    &b.data()[i * q * r..(i + 1) * q * r],
                    &mut out[i * p * r..(i + 1) * p * r],
                    p,
                    q,
                    r,
                );
            }
        }
        let mut out_shape = batch_a.to_vec();
        out_shape.extend_from_slice(&[p, r]);
        Ok(self.tape.record(
            Tensor::from_parts(out_shape, out),
            &[self, rhs],
            Box::new(move |g, inputs, _, needs| {
                let (a, b) = (inputs[0], inputs[1]);
                let g = g.data();
                let ga = needs[0].then(|| {
                    let mut ga = vec![T::zero(); a.numel()];
                    if shared_rhs {
                        gemm_nt(g, b.data(), &mut ga, batch * p, r, q);
                    } else {
                        for i in 0..batch {
                            gemm_nt(
                                &g[i * p * r..(i + 1) * p * r],
                                &b.data()[i * q * r..(i + 1) * q * r],
                                &mut ga[i * p * q..(i + 1) * p * q],
                                p,
                                r,
                                q,
                            );
                        }
                    }
                    Tensor::from_parts(a.shape().to_vec(), ga)
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); b.numel()];
                    if shared_rhs {
                        gemm_tn(a.data(), g, &mut gb, q, batch * p, r);
                    } else {
                        for i in 0..batch {
                            gemm_tn(
                                &a.data()[i * p * q..(i + 1) * p * q],
                                &g[i * p * r..(i + 1) * p * r],
                                &mut gb[i * q * r..(i + 1) * q * r],
                                q,
                                p,
                                r,
                            );
                        }
                    }
                    Tensor::from_parts(b.shape().to_vec(), gb)
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(|g, inputs, _, _| vec![Some(g.reshape(inputs[0].shape()).expect("same numel"))]),
        ))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().permute(axes)?;
        let inv = inverse_axes(axes);
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g, _, _, _| {
                let data = permute(g.data(), g.shape(), &inv);
                let shape: Vec<usize> = inv.iter().map(|&a| g.shape()[a]).collect();
                vec![Some(Tensor::from_parts(shape, data))]
            }),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t, T>> {
        let mut axes: Vec<usize> = (0..self.shape().len()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::shape("transpose", format!("axes {} {}", a, b)));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = self.value().narrow(axis, start, len)?;
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g, inputs, _, _| {
                let shape = inputs[0].shape();
                let outer = numel(&shape[..axis]);
                let dim = shape[axis];
                let inner = numel(&shape[axis + 1..]);
                let mut gx = vec![T::zero(); inputs[0].numel()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(shape.to_vec(), gx))]
            }),
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {} of {:?}", axis, base)));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, base)));
            }
            lens.push(s[axis]);
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        Ok(first.tape.record(
            Tensor::from_parts(shape, data),
            parts,
            Box::new(move |g, inputs, _, needs| {
                let mut offset = 0;
                inputs
                    .iter()
                    .zip(&lens)
                    .zip(needs)
                    .map(|((x, &len), &need)| {
                        let start = offset;
                        offset += len;
                        if !need {
                            return None;
                        }
                        let mut gx = Vec::with_capacity(x.numel());
                        for o in 0..outer {
                            let src = (o * total + start) * inner;
                            gx.extend_from_slice(&g.data()[src..src + len * inner]);
                        }
                        Some(Tensor::from_parts(x.shape().to_vec(), gx))
                    })
                    .collect()
            }),
        ))
    }

    /// Reverses the order of entries along `axis`.
    pub fn flip(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape("flip", format!("axis {} of {:?}", axis, shape)));
        }
        let outer = numel(&shape[..axis]);
        let dim = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let flip = move |src: &[T]| {
            let mut out = Vec::with_capacity(src.len());
            for o in 0..outer {
                for d in (0..dim).rev() {
                    let s = (o * dim + d) * inner;
                    out.extend_from_slice(&src[s..s + inner]);
                }
            }
            out
        };
        let out = Tensor::from_parts(shape.clone(), flip(self.value().data()));
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g, _, _, _| vec![Some(Tensor::from_parts(g.shape().to_vec(), flip(g.data())))]),
        ))
    }

    /// Repeats the tensor along a new leading axis of length `n`.
    pub fn expand_leading(self, n: usize) -> Var<'t, T> {
        let x = self.value();
        let mut data = Vec::with_capacity(n * x.numel());
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(x.shape());
        self.tape.record(
            Tensor::from_parts(shape, data),
            &[self],
            Box::new(|g, inputs, _, _| vec![Some(reduce_to(g.data(), inputs[0].shape()))]),
        )
    }

    /// Softmax along `axis`, with the running maximum subtracted first.
    /// NaN inputs propagate to every entry of the affected slice.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {} of {:?}", axis, shape)));
        }
        let outer = numel(&shape[..axis]);
        let dim = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut y = vec![T::zero(); x.numel()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let mut m = T::neg_infinity();
                for d in 0..dim {
                    let v = xd[at(d)];
                    if v > m || v.is_nan() {
                        m = v;
                    }
                }
                let mut s = T::zero();
                for d in 0..dim {
                    let e = (xd[at(d)] - m).exp();
                    y[at(d)] = e;
                    s += e;
                }
                for d in 0..dim {
                    y[at(d)] /= s;
                }
            }
        }
        Ok(self.tape.record(
            Tensor::from_parts(shape, y),
            &[self],
            Box::new(move |g, _, y, _| {
                let (gd, yd) = (g.data(), y.data());
                let mut gx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |d: usize| (o * dim + d) * inner + i;
                        let mut dot = T::zero();
                        for d in 0..dim {
                            dot += gd[at(d)] * yd[at(d)];
                        }
                        for d in 0..dim {
                            gx[at(d)] = yd[at(d)] * (gd[at(d)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
            }),
        ))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("affine params must be [{}], got {:?} {:?}", d, gamma.shape(), beta.shape()),
            ));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let rows = x.numel() / d;
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.numel()];
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) * inv_d;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) * inv_d;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        let xhat = Tensor::from_parts(shape.clone(), xhat);
        let rstd = Tensor::from_parts(vec![rows], rstd);
        Ok(self.tape.record(
            Tensor::from_parts(shape, y),
            &[self, gamma, beta],
            Box::new(move |g, inputs, _, needs| {
                let gamma = inputs[1].data();
                let (gd, hd) = (g.data(), xhat.data());
                let mut gx = needs[0].then(|| vec![T::zero(); gd.len()]);
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &hd[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let dh = gr[j] * gamma[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    if let Some(gx) = gx.as_mut() {
                        let rs = rstd.data()[r];
                        for j in 0..d {
                            gx[r * d + j] = rs * (gr[j] * gamma[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                vec![
                    gx.map(|v| Tensor::from_parts(g.shape().to_vec(), v)),
                    needs[1].then(|| Tensor::from_parts(vec![d], ggamma)),
                    needs[2].then(|| Tensor::from_parts(vec![d], gbeta)),
                ]
            }),
        ))
    }

    /// Mean weighted binary cross-entropy on logits. The positive term is
    /// scaled by `pos_weight`.
    pub fn bce_with_logits(self, targets: &Tensor<T>, pos_weight: T) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.shape() != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", x.shape(), targets.shape()),
            ));
        }
        let n = T::of(x.numel() as f64);
        let mut total = T::zero();
        for (&z, &y) in x.data().iter().zip(targets.data()) {
            total += pos_weight * y * softplus(-z) + (T::one() - y) * softplus(z);
        }
        let targets = targets.clone();
        Ok(self.tape.record(
            Tensor::scalar(total / n),
            &[self],
            Box::new(move |g, inputs, _, _| {
                let scale = g.item() / n;
                let data = inputs[0]
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &y)| {
                        scale * (-pos_weight * y * sigmoid(-z) + (T::one() - y) * sigmoid(z))
                    })
                    .collect();
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), data))]
            }),
        ))
    }

    /// Global weighted ranking pooling over the last axis: entries sorted in
    /// descending order are weighted by `decay^rank` and the weighted mean is
    /// returned. `decay = 1` is the plain mean; `decay → 0` approaches max.
    pub fn gwrp(self, decay: f64) -> Result<Var<'t, T>> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("gwrp decay {} outside (0,1]", decay)));
        }
        let x = self.value();
        let shape = x.shape().to_vec();
        let m = *shape.last().ok_or_else(|| Error::shape("gwrp", "rank 0"))?;
        if m == 0 {
            return Err(Error::shape("gwrp", "empty pooling axis"));
        }
        let mut weights = Vec::with_capacity(m);
        let mut w = 1.0f64;
        for _ in 0..m {
            weights.push(w);
            w *= decay;
        }
        let z: f64 = weights.iter().sum();
        let weights: Vec<T> = weights.into_iter().map(|w| T::of(w / z)).collect();
        let rows = x.numel() / m;
        let mut order = Vec::with_capacity(x.numel());
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * m..(r + 1) * m];
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
            let mut acc = T::zero();
            for (rank, &i) in idx.iter().enumerate() {
                acc += weights[rank] * row[i];
            }
            out.push(acc);
            order.extend(idx);
        }
        Ok(self.tape.record(
            Tensor::from_parts(shape[..shape.len() - 1].to_vec(), out),
            &[self],
            Box::new(move |g, inputs, _, _| {
                let mut gx = vec![T::zero(); inputs[0].numel()];
                for r in 0..rows {
                    let gv = g.data()[r];
                    for rank in 0..m {
                        gx[r * m + order[r * m + rank]] = gv * weights[rank];
                    }
                }
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx))]
            }),
        ))
    }

    /// Causal depthwise 1-D convolution over `[B, L, C]` with kernel
    /// `weight: [C, K]` and `bias: [C]`. Output at step `t` sees inputs
    /// `t-K+1 ..= t` only (left zero padding).
    pub fn conv1d_causal(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let (w, b) = (weight.value(), bias.value());
        let s = x.shape();
        if s.len() != 3 || w.rank() != 2 || w.shape()[0] != s[2] || b.shape() != [s[2]] {
            return Err(Error::shape(
                "conv1d_causal",
                format!("x {:?}, weight {:?}, bias {:?}", s, w.shape(), b.shape()),
            ));
        }
        let (bsz, len, ch) = (s[0], s[1], s[2]);
        let k = w.shape()[1];
        let mut y = vec![T::zero(); x.numel()];
        for bi in 0..bsz {
            for t in 0..len {
                let row = &mut y[(bi * len + t) * ch..(bi * len + t + 1) * ch];
                row.copy_from_slice(b.data());
                for j in 0..k {
                    let Some(src_t) = (t + j).checked_sub(k - 1) else { continue };
                    let src = &x.data()[(bi * len + src_t) * ch..(bi * len + src_t + 1) * ch];
                    for c in 0..ch {
                        row[c] += w.data()[c * k + j] * src[c];
                    }
                }
            }
        }
        Ok(self.tape.record(
            Tensor::from_parts(s.to_vec(), y),
            &[self, weight, bias],
            Box::new(move |g, inputs, _, needs| {
                let (x, w) = (inputs[0].data(), inputs[1].data());
                let gd = g.data();
                let mut gx = vec![T::zero(); x.len()];
                let mut gw = vec![T::zero(); ch * k];
                let mut gb = vec![T::zero(); ch];
                for bi in 0..bsz {
                    for t in 0..len {
                        let grow = &gd[(bi * len + t) * ch..(bi * len + t + 1) * ch];
                        for c in 0..ch {
                            gb[c] += grow[c];
                        }
                        for j in 0..k {
                            let Some(src_t) = (t + j).checked_sub(k - 1) else { continue };
                            let base = (bi * len + src_t) * ch;
                            for c in 0..ch {
                                gx[base + c] += grow[c] * w[c * k + j];
                                gw[c * k + j] += grow[c] * x[base + c];
                            }
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
                    needs[1].then(|| Tensor::from_parts(vec![ch, k], gw)),
                    needs[2].then(|| Tensor::from_parts(vec![ch], gb)),
                ]
            }),
        ))
    }

    /// Same-padded 2-D convolution, channels last: `x: [B, H, W, Cin]`,
    /// `weight: [Cout, K, K, Cin]` with odd `K`, `bias: [Cout]`.
    pub fn conv2d_same(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let (w, b) = (weight.value(), bias.value());
        let s = x.shape().to_vec();
        let ws = w.shape().to_vec();
        if s.len() != 4 || ws.len() != 4 || ws[1] != ws[2] || ws[1] % 2 == 0 || ws[3] != s[3] || b.shape() != [ws[0]] {
            return Err(Error::shape(
                "conv2d_same",
                format!("x {:?}, weight {:?}, bias {:?}", s, ws, b.shape()),
            ));
        }
        let (bsz, h, wd, cin) = (s[0], s[1], s[2], s[3]);
        let (cout, k) = (ws[0], ws[1]);
        let geom = ConvGeom { bsz, h, w: wd, k };
        let mut y = vec![T::zero(); bsz * h * wd * cout];
        for px in 0..bsz * h * wd {
            y[px * cout..(px + 1) * cout].copy_from_slice(b.data());
        }
        {
            let (xd, wdat) = (x.data(), w.data());
            geom.for_each_tap(|out_px, src_px, tap| {
                let src = &xd[src_px * cin..(src_px + 1) * cin];
                for o in 0..cout {
                    let wrow = &wdat[(o * k * k + tap) * cin..(o * k * k + tap + 1) * cin];
                    let mut acc = T::zero();
                    for c in 0..cin {
                        acc += wrow[c] * src[c];
                    }
                    y[out_px * cout + o] += acc;
                }
            });
        }
        Ok(self.tape.record(
            Tensor::from_parts(vec![bsz, h, wd, cout], y),
            &[self, weight, bias],
            Box::new(move |g, inputs, _, needs| {
                let (xd, wdat, gd) = (inputs[0].data(), inputs[1].data(), g.data());
                let mut gx = vec![T::zero(); xd.len()];
                let mut gw = vec![T::zero(); wdat.len()];
                let mut gb = vec![T::zero(); cout];
                for px in 0..bsz * h * wd {
                    for o in 0..cout {
                        gb[o] += gd[px * cout + o];
                    }
                }
                geom.for_each_tap(|out_px, src_px, tap| {
                        for o in 0..cout {
                            let gv = gd[out_px * cout + o];
                            let wbase = (o * k * k + tap) * cin;
                            for c in 0..cin {
                                gx[src_px * cin + c] += gv * wdat[wbase + c];
                                gw[wbase + c] += gv * xd[src_px * cin + c];
                        }
                    }
                });
                vec![
                    needs[0].then(|| Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
                    needs[1].then(|| Tensor::from_parts(inputs[1].shape().to_vec(), gw)),
                    needs[2].then(|| Tensor::from_parts(vec![cout], gb)),
                ]
            }),
        ))
    }
}

#[cfg(test)]
#[path = "ops_tests.rs"]
mod tests;
