//! 3D rotary position encoding.
//!
//! Each head is split into `t`, `h` and `w` sub-spaces (see
//! [`rope_split`](super::rope_split)). Within an axis of width `d_a`, pair
//! `j` rotates by `(pos / scale) · base^(-2j / d_a)`. A `scale` above 1
//! compresses positions, which is how frequencies are interpolated when the
//! evaluation resolution differs from the training one.

use super::{rope_split, Coord};
use crate::tensor::{Real, RopeTable, Tape, Tensor};
use crate::Result;

/// Per-axis position divisors; `[1, 1, 1]` at the training resolution.
pub type ResolutionScale = [f64; 3];

pub const NATIVE: ResolutionScale = [1.0, 1.0, 1.0];

pub fn table<T: Real>(positions: &[Coord], head_dim: usize, base: f64, scale: ResolutionScale) -> Result<RopeTable<T>> {
    let split = rope_split(head_dim)?;
    let pairs = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * pairs);
    let mut sin = Vec::with_capacity(positions.len() * pairs);
    for pos in positions {
        for axis in 0..3 {
            let da = split[axis];
            let p = pos[axis] as f64 / scale[axis];
            for j in 0..da / 2 {
                let freq = base.powf(-2.0 * j as f64 / da as f64);
                let angle = p * freq;
                cos.push(T::c(angle.cos()));
                sin.push(T::c(angle.sin()));
            }
        }
    }
    Ok(RopeTable {
        tokens: positions.len(),
        pairs,
        cos,
        sin,
    })
}

/// Applies the rotation to a plain `[tokens, heads·head_dim]` array.
pub fn rope_apply<T: Real>(
    x: &Tensor<T>,
    heads: usize,
    positions: &[Coord],
    base: f64,
    scale: ResolutionScale,
) -> Result<Tensor<T>> {
    let head_dim = x.last_dim() / heads;
    let t = table(positions, head_dim, base, scale)?;
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let r = tape.rope(v, &t)?;
    Ok(tape.value(r).clone())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn dot_per_head(a: &Tensor<f64>, b: &Tensor<f64>, heads: usize) -> Vec<f64> {
        let hd = a.last_dim() / heads;
        (0..heads)
            .map(|h| (0..hd).map(|i| a.data()[h * hd + i] * b.data()[h * hd + i]).sum())
            .collect()
    }

    #[test]
    fn origin_is_identity() {
        let x = Tensor::from_fn(&[1, 24], |i| i as f64 * 0.1 - 1.0);
        let y = rope_apply(&x, 2, &[[0, 0, 0]], 100.0, NATIVE).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn preserves_pair_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f64> = Tensor::from_fn(&[1, 16], |_| rng.random_range(-1.0..1.0));
        let y = rope_apply(&x, 1, &[[3, 1, 7]], 100.0, NATIVE).unwrap();
        for j in 0..8 {
            let n0 = x.data()[2 * j].hypot(x.data()[2 * j + 1]);
            let n1 = y.data()[2 * j].hypot(y.data()[2 * j + 1]);
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_depend_only_on_relative_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let q = Tensor::from_fn(&[1, 32], |_| rng.random_range(-1.0..1.0));
            let k = Tensor::from_fn(&[1, 32], |_| rng.random_range(-1.0..1.0));
            let p1 = [rng.random_range(0..5), rng.random_range(0..5), rng.random_range(0..5)];
            let p2 = [rng.random_range(0..5), rng.random_range(0..5), rng.random_range(0..5)];
            let delta = [rng.random_range(0..9), rng.random_range(0..9), rng.random_range(0..9)];
            let s1 = [p1[0] + delta[0], p1[1] + delta[1], p1[2] + delta[2]];
            let s2 = [p2[0] + delta[0], p2[1] + delta[1], p2[2] + delta[2]];
            let a = dot_per_head(
                &rope_apply(&q, 2, &[p1], 100.0, NATIVE).unwrap(),
                &rope_apply(&k, 2, &[p2], 100.0, NATIVE).unwrap(),
                2,
            );
            let b = dot_per_head(
                &rope_apply(&q, 2, &[s1], 100.0, NATIVE).unwrap(),
                &rope_apply(&k, 2, &[s2], 100.0, NATIVE).unwrap(),
                2,
            );
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn doubled_scale_matches_halved_position() {
        let x = Tensor::from_fn(&[1, 16], |i| (i as f64).sin());
        let a = rope_apply(&x, 1, &[[2, 4, 6]], 100.0, [2.0, 2.0, 2.0]).unwrap();
        let b = rope_apply(&x, 1, &[[1, 2, 3]], 100.0, NATIVE).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_head_dim_is_a_config_error() {
        let x = Tensor::<f64>::zeros(&[1, 9]);
        assert!(rope_apply(&x, 1, &[[0, 0, 0]], 100.0, NATIVE).is_err());
    }
}
