//! Selective state space scan and the Mamba block built around it.
//!
//! Discretisation is zero-order hold on the state matrix and Euler on the
//! input matrix, as in the reference Mamba implementation:
//!
//! ```text
//! h_t = exp(Δ_t A) ⊙ h_{t-1} + (Δ_t B_t) u_t,   h_0 = 0
//! y_t = C_t · h_t + D ⊙ u_t
//! ```
//!
//! `A = -exp(A_log)` is strictly negative, so every decay factor lies in
//! (0, 1] and the state stays bounded for bounded inputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Float, Tensor, Var};

/// Fixed state size, matching the cost model's SSM constant.
pub const STATE_DIM: usize = 16;
pub const EXPAND: usize = 2;
pub const CONV_KERNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MambaConfig {
    pub model_dim: usize,
    pub state_dim: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub dt_rank: usize,
}

impl MambaConfig {
    pub fn new(model_dim: usize) -> Self {
        MambaConfig {
            model_dim,
            state_dim: STATE_DIM,
            expand: EXPAND,
            conv_kernel: CONV_KERNEL,
            dt_rank: model_dim.div_ceil(16),
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.expand * self.model_dim
    }
}

/// Runs the selective scan over `u: [B, L, E]`.
///
/// `delta: [B, L, E]` must be positive (the block feeds it through softplus),
/// `a: [E, S]`, `b` and `c`: `[B, L, S]`, `d_skip: [E]`. Hidden states for
/// every step are kept for the backward pass.
pub fn selective_scan<'t, T: Float>(
    u: Var<'t, T>,
    delta: Var<'t, T>,
    a: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
    d_skip: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (uv, dv, av, bv, cv, skip) = (
        u.value(),
        delta.value(),
        a.value(),
        b.value(),
        c.value(),
        d_skip.value(),
    );
    let us = uv.shape();
    if us.len() != 3 || us[1] == 0 {
        return Err(Error::shape("selective_scan", format!("u must be [B, L>=1, E], got {:?}", us)));
    }
    let (bsz, len, e) = (us[0], us[1], us[2]);
    let s = av.shape().get(1).copied().unwrap_or(0);
    let ok = dv.shape() == us
        && av.shape() == [e, s]
        && bv.shape() == [bsz, len, s]
        && cv.shape() == [bsz, len, s]
        && skip.shape() == [e];
    if !ok {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "u {:?} delta {:?} A {:?} B {:?} C {:?} D {:?}",
                us,
                dv.shape(),
                av.shape(),
                bv.shape(),
                cv.shape(),
                skip.shape()
            ),
        ));
    }
    if !dv.all_finite() {
        return Err(Error::Numerical("non-finite step size in selective scan".into()));
    }

    let (ud, dd, ad, bd, cd, sd) = (uv.data(), dv.data(), av.data(), bv.data(), cv.data(), skip.data());
    let mut states = vec![T::zero(); bsz * len * e * s];
    let mut y = vec![T::zero(); bsz * len * e];
    let mut h = vec![T::zero(); e * s];
    for bi in 0..bsz {
        h.iter_mut().for_each(|x| *x = T::zero());
        for t in 0..len {
            let row = bi * len + t;
            let (brow, crow) = (&bd[row * s..(row + 1) * s], &cd[row * s..(row + 1) * s]);
            for ei in 0..e {
                let (uval, dval) = (ud[row * e + ei], dd[row * e + ei]);
                let hs = &mut h[ei * s..(ei + 1) * s];
                let mut acc = T::zero();
                for si in 0..s {
                    hs[si] = (dval * ad[ei * s + si]).exp() * hs[si] + dval * brow[si] * uval;
                    acc += crow[si] * hs[si];
                }
                y[row * e + ei] = acc + sd[ei] * uval;
            }
            states[row * e * s..(row + 1) * e * s].copy_from_slice(&h);
        }
    }
    let states = Tensor::from_parts(vec![bsz, len, e, s], states);
    let out = Tensor::from_parts(vec![bsz, len, e], y);

    Ok(u.tape().record(
        out,
        &[u, delta, a, b, c, d_skip],
        Box::new(move |g, inputs, _, needs| {
            let (ud, dd, ad, bd, cd, sd) = (
                inputs[0].data(),
                inputs[1].data(),
                inputs[2].data(),
                inputs[3].data(),
                inputs[4].data(),
                inputs[5].data(),
            );
            let gd = g.data();
            let hs_all = states.data();
            let mut du = vec![T::zero(); ud.len()];
            let mut ddelta = vec![T::zero(); dd.len()];
            let mut da = vec![T::zero(); ad.len()];
            let mut db = vec![T::zero(); bd.len()];
            let mut dc = vec![T::zero(); cd.len()];
            let mut dskip = vec![T::zero(); sd.len()];
            let mut dh = vec![T::zero(); e * s];
            for bi in 0..bsz {
                dh.iter_mut().for_each(|x| *x = T::zero());
                for t in (0..len).rev() {
                    let row = bi * len + t;
                    let h_t = &hs_all[row * e * s..(row + 1) * e * s];
                    let h_prev = (t > 0).then(|| &hs_all[(row - 1) * e * s..row * e * s]);
                    let brow = &bd[row * s..(row + 1) * s];
                    let crow = &cd[row * s..(row + 1) * s];
                    for ei in 0..e {
                        let gy = gd[row * e + ei];
                        let (uval, dval) = (ud[row * e + ei], dd[row * e + ei]);
                        dskip[ei] += gy * uval;
                        let mut du_acc = gy * sd[ei];
                        let mut dd_acc = T::zero();
                        for si in 0..s {
                            let k = ei * s + si;
                            dc[row * s + si] += gy * h_t[k];
                            dh[k] += gy * crow[si];
                            let aval = ad[k];
                            let decay = (dval * aval).exp();
                            let hp = h_prev.map_or(T::zero(), |hp| hp[k]);
                            let dhk = dh[k];
                            dd_acc += dhk * (aval * decay * hp + brow[si] * uval);
                            da[k] += dhk * dval * decay * hp;
                            db[row * s + si] += dhk * dval * uval;
                            du_acc += dhk * dval * brow[si];
                            dh[k] = dhk * decay;
                        }
                        du[row * e + ei] = du_acc;
                        ddelta[row * e + ei] = dd_acc;
                    }
                }
            }
            let mk = |need: bool, i: usize, v: Vec<T>| need.then(|| Tensor::from_parts(inputs[i].shape().to_vec(), v));
            vec![
                mk(needs[0], 0, du),
                mk(needs[1], 1, ddelta),
                mk(needs[2], 2, da),
                mk(needs[3], 3, db),
                mk(needs[4], 4, dc),
                mk(needs[5], 5, dskip),
            ]
        }),
    ))
}

/// Parameters of one Mamba block, by id in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub config: MambaConfig,
    pub in_proj: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: Linear,
}

impl MambaBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: MambaConfig,
        rng: &mut R,
    ) -> Self {
        let (d, e, s, r, k) = (
            config.model_dim,
            config.inner_dim(),
            config.state_dim,
            config.dt_rank,
            config.conv_kernel,
        );
        let in_proj = Linear::new(store, &format!("{prefix}.in_proj"), d, 2 * e, false, 0.02, rng);
        let bound = 1.0 / (k as f64).sqrt();
        let conv_weight = store.add(format!("{prefix}.conv1d.weight"), Tensor::uniform(&[e, k], -bound, bound, rng));
        let conv_bias = store.add(format!("{prefix}.conv1d.bias"), Tensor::zeros(&[e]));
        let x_proj = Linear::new(store, &format!("{prefix}.x_proj"), e, r + 2 * s, false, 0.02, rng);

        let dt_std = 1.0 / (r as f64).sqrt();
        let dt_proj = Linear {
            weight: store.add(format!("{prefix}.dt_proj.weight"), Tensor::uniform(&[r, e], -dt_std, dt_std, rng)),
            // softplus(bias) = dt with dt log-uniform in [1e-3, 1e-1]
            bias: Some(store.add(
                format!("{prefix}.dt_proj.bias"),
                Tensor::from_fn(&[e], |_| {
                    let dt = (rng.random_range(0.001f64.ln()..0.1f64.ln())).exp();
                    T::of(dt + (-(-dt).exp_m1()).ln())
                }),
            )),
            in_dim: r,
            out_dim: e,
        };
        let a_log = store.add(
            format!("{prefix}.A_log"),
            Tensor::from_fn(&[e, s], |i| T::of(((i % s) as f64 + 1.0).ln())),
        );
        let d_skip = store.add(format!("{prefix}.D"), Tensor::ones(&[e]));
        let out_proj = Linear::new(store, &format!("{prefix}.out_proj"), e, d, false, 0.02, rng);
        MambaBlock {
            config,
            in_proj,
            conv_weight,
            conv_bias,
            x_proj,
            dt_proj,
            a_log,
            d_skip,
            out_proj,
        }
    }

    /// `x: [B, L, D]` → `[B, L, D]`.
    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let cfg = &self.config;
        if shape.len() != 3 || shape[2] != cfg.model_dim {
            return Err(Error::shape(
                "mamba_block",
                format!("expected [B, L, {}], got {:?}", cfg.model_dim, shape),
            ));
        }
        let (e, s, r) = (cfg.inner_dim(), cfg.state_dim, cfg.dt_rank);
        let xz = self.in_proj.forward(p, x)?;
        let x_branch = xz.narrow(2, 0, e)?;
        let z = xz.narrow(2, e, e)?;
        let u = x_branch
            .conv1d_causal(p.var(self.conv_weight), p.var(self.conv_bias))?
            .silu();
        let dbc = self.x_proj.forward(p, u)?;
        let dt = dbc.narrow(2, 0, r)?;
        let b = dbc.narrow(2, r, s)?;
        let c = dbc.narrow(2, r + s, s)?;
        let delta = self.dt_proj.forward(p, dt)?.softplus();
        let a = p.var(self.a_log).exp().neg();
        let y = selective_scan(u, delta, a, b, c, p.var(self.d_skip))?;
        let gated = y.mul(z.silu())?;
        self.out_proj.forward(p, gated)
    }
}

/// Forward scan plus a scan over the reversed sequence, summed:
/// `fwd(x) + flip(bwd(flip(x)))`. Passing the same block twice shares weights.
pub fn bidirectional<'t, T: Float>(
    fwd: &MambaBlock,
    bwd: &MambaBlock,
    p: &Bound<'t, T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let forward = fwd.forward(p, x)?;
    let backward = bwd.forward(p, x.flip(1)?)?.flip(1)?;
    forward.add(backward)
}
