//! Cross-plane Mamba: patch tokens of all planes in a volume are scanned as
//! one interleaved sequence.
//!
//! Interleaved index `k = m·N + n` holds patch `m` of plane `n`, so each run
//! of `N` consecutive tokens covers the same patch position across every
//! plane in slice order.

use crate::error::{Error, Result};
use crate::mamba::MambaBlock;
use crate::nn::{Bound, LayerNorm};
use crate::tensor::{Float, Tensor, Var};

/// `[N, M, D]` → `[1, M·N, D]`.
pub fn interleave<T: Float>(patches: &Tensor<T>) -> Result<Tensor<T>> {
    let s = patches.shape();
    if s.len() != 3 {
        return Err(Error::shape("interleave", format!("expected [N, M, D], got {:?}", s)));
    }
    let (n, m, d) = (s[0], s[1], s[2]);
    patches.permute(&[1, 0, 2])?.reshape(&[1, m * n, d])
}

/// Inverse of [`interleave`]: `[1, M·N, D]` → `[N, M, D]`.
pub fn deinterleave<T: Float>(seq: &Tensor<T>, planes: usize) -> Result<Tensor<T>> {
    let s = seq.shape();
    if s.len() != 3 || s[0] != 1 || planes == 0 || s[1] % planes != 0 {
        return Err(Error::shape(
            "deinterleave",
            format!("cannot split {:?} into {} planes", s, planes),
        ));
    }
    let (m, d) = (s[1] / planes, s[2]);
    seq.reshape(&[m, planes, d])?.permute(&[1, 0, 2])
}

/// Interleaved position of patch `m` of plane `n`.
pub fn interleaved_index(m: usize, n: usize, planes: usize) -> usize {
    m * planes + n
}

/// Batched, differentiable interleave: `[V·N, M, D]` → `[V, M·N, D]`.
pub fn interleave_var<'t, T: Float>(patches: Var<'t, T>, planes: usize) -> Result<Var<'t, T>> {
    let s = patches.shape();
    if s.len() != 3 || planes == 0 || s[0] % planes != 0 {
        return Err(Error::shape(
            "interleave",
            format!("{:?} is not a whole number of {}-plane volumes", s, planes),
        ));
    }
    let (v, m, d) = (s[0] / planes, s[1], s[2]);
    patches
        .reshape(&[v, planes, m, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[v, m * planes, d])
}

/// Batched inverse: `[V, M·N, D]` → `[V·N, M, D]`.
pub fn deinterleave_var<'t, T: Float>(seq: Var<'t, T>, planes: usize) -> Result<Var<'t, T>> {
    let s = seq.shape();
    if s.len() != 3 || planes == 0 || s[1] % planes != 0 {
        return Err(Error::shape(
            "deinterleave",
            format!("cannot split {:?} into {} planes", s, planes),
        ));
    }
    let (v, m, d) = (s[0], s[1] / planes, s[2]);
    seq.reshape(&[v, m, planes, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[v * planes, m, d])
}

/// Cross-plane block on a token stack `[V·N, 1+M, D]` (class token first).
///
/// Returns only the block's contribution: patch rows carry the de-interleaved
/// Mamba output and class rows are exactly zero. The caller adds the
/// residual, so class tokens pass through unchanged.
pub fn cpm_block<'t, T: Float>(
    p: &Bound<'t, T>,
    norm: &LayerNorm,
    mamba: &MambaBlock,
    tokens: Var<'t, T>,
    planes: usize,
) -> Result<Var<'t, T>> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] < 2 {
        return Err(Error::shape("cpm_block", format!("expected [V·N, 1+M, D], got {:?}", s)));
    }
    let (rows, m, d) = (s[0], s[1] - 1, s[2]);
    let patches = tokens.narrow(1, 1, m)?;
    let seq = interleave_var(patches, planes)?;
    let mixed = mamba.forward(p, norm.forward(p, seq)?)?;
    let back = deinterleave_var(mixed, planes)?;
    let zeros = tokens.tape().constant(Tensor::zeros(&[rows, 1, d]));
    Var::concat(&[zeros, back], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mamba::MambaConfig;
    use crate::nn::ParamStore;
    use crate::tensor::Tape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_planes_three_patches_order() {
        // token value encodes (plane, patch) as 10·n + m
        let t = Tensor::<f32>::from_fn(&[2, 3, 1], |i| (10 * (i / 3) + i % 3) as f32);
        let seq = interleave(&t).unwrap();
        assert_eq!(seq.shape(), &[1, 6, 1]);
        assert_eq!(seq.data(), &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);
        assert_eq!(interleaved_index(2, 1, 2), 5);
    }

    #[test]
    fn single_plane_is_flattening() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::<f32>::randn(&[1, 5, 3], 1.0, &mut rng);
        let seq = interleave(&t).unwrap();
        assert_eq!(seq.data(), t.data());
    }

    #[test]
    fn rejects_bad_plane_counts() {
        let t = Tensor::<f32>::zeros(&[1, 6, 2]);
        assert!(deinterleave(&t, 4).is_err());
        assert!(deinterleave(&t, 0).is_err());
        let tape = Tape::<f32>::new();
        assert!(interleave_var(tape.constant(Tensor::zeros(&[3, 2, 2])), 2).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(n in 1usize..6, m in 1usize..10, d in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::<f32>::randn(&[n, m, d], 1.0, &mut rng);
            let back = deinterleave(&interleave(&t).unwrap(), n).unwrap();
            prop_assert_eq!(back, t.clone());

            let tape = Tape::new();
            let v = tape.constant(Tensor::<f32>::randn(&[2 * n, m, d], 1.0, &mut rng));
            let seq = interleave_var(v, n).unwrap();
            let back = deinterleave_var(seq, n).unwrap().to_tensor();
            prop_assert_eq!(back, v.to_tensor());
            // batched form agrees with the single-volume form
            let first = v.to_tensor().narrow(0, 0, n).unwrap();
            let single = interleave(&first).unwrap();
            let batched = seq.to_tensor().narrow(0, 0, 1).unwrap();
            prop_assert_eq!(single, batched);
        }
    }

    fn setup(d: usize, seed: u64) -> (ParamStore<f64>, LayerNorm, MambaBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let norm = LayerNorm::new(&mut store, "cpm.0.norm", d);
        let mamba = MambaBlock::new(&mut store, "cpm.0.mamba", MambaConfig::new(d), &mut rng);
        (store, norm, mamba)
    }

    fn run(store: &ParamStore<f64>, norm: &LayerNorm, mamba: &MambaBlock, x: &Tensor<f64>, n: usize) -> Tensor<f64> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        cpm_block(&p, norm, mamba, tape.constant(x.clone()), n)
            .unwrap()
            .to_tensor()
    }

    #[test]
    fn class_rows_of_contribution_are_zero() {
        let (store, norm, mamba) = setup(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[6, 5, 4], 1.0, &mut rng);
        let y = run(&store, &norm, &mamba, &x, 3);
        assert_eq!(y.shape(), x.shape());
        for r in 0..6 {
            assert!((0..4).all(|d| y.get(&[r, 0, d]) == 0.0));
        }
    }

    #[test]
    fn single_plane_matches_in_plane_pass() {
        let (store, norm, mamba) = setup(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[2, 5, 4], 1.0, &mut rng);
        let y = run(&store, &norm, &mamba, &x, 1);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let patches = tape.constant(x.narrow(1, 1, 4).unwrap());
        let direct = mamba
            .forward(&p, norm.forward(&p, patches).unwrap())
            .unwrap()
            .to_tensor();
        assert_eq!(y.narrow(1, 1, 4).unwrap(), direct);
    }

    #[test]
    fn perturbation_reaches_exactly_the_interleaved_suffix() {
        let (store, norm, mamba) = setup(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, m) = (3, 4);
        let x = Tensor::<f64>::randn(&[n, 1 + m, 4], 1.0, &mut rng);
        let base = run(&store, &norm, &mamba, &x, n);
        for pn in 0..n {
            for pm in 0..m {
                let mut xp = x.clone();
                for d in 0..4 {
                    xp.data_mut()[(pn * (1 + m) + 1 + pm) * 4 + d] += 0.3 * (d as f64 + 1.0);
                }
                let out = run(&store, &norm, &mamba, &xp, n);
                let k0 = interleaved_index(pm, pn, n);
                for qn in 0..n {
                    for qm in 0..m {
                        let changed = (0..4).any(|d| out.get(&[qn, 1 + qm, d]) != base.get(&[qn, 1 + qm, d]));
                        assert_eq!(changed, interleaved_index(qm, qn, n) >= k0);
                    }
                }
            }
        }
    }
}
