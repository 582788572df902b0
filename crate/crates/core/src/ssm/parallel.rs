//! Work-efficient (Blelloch) prefix scan over affine maps.

use rayon::prelude::*;

use super::{Result, StepParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The map `h ↦ a h + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine<T> {
    pub a: T,
    pub b: T,
}

impl<T: Scalar> Affine<T> {
    pub fn identity() -> Self {
        Self { a: T::one(), b: T::zero() }
    }

    /// Apply `self` first, then `next`: `(a₂a₁, a₂b₁ + b₂)`.
    #[inline]
    pub fn then(self, next: Self) -> Self {
        Self { a: next.a * self.a, b: next.a * self.b + next.b }
    }

    #[inline]
    pub fn apply(self, h: T) -> T {
        self.a * h + self.b
    }
}

/// Exclusive prefix compositions: `out[i] = e[0] then … then e[i-1]`,
/// with `out[0]` the identity.
pub fn exclusive_scan<T: Scalar>(elems: &[Affine<T>]) -> Vec<Affine<T>> {
    let n = elems.len();
    if n == 0 {
        return Vec::new();
    }
    let size = n.next_power_of_two();
    let mut buf = Vec::with_capacity(size);
    buf.extend_from_slice(elems);
    buf.resize(size, Affine::identity());

    // up-sweep: each right node accumulates its whole subtree
    let mut stride = 1;
    while stride < size {
        let step = stride * 2;
        for i in (0..size).step_by(step) {
            let (l, r) = (i + stride - 1, i + step - 1);
            buf[r] = buf[l].then(buf[r]);
        }
        stride = step;
    }

    // down-sweep
    buf[size - 1] = Affine::identity();
    while stride > 1 {
        let half = stride / 2;
        for i in (0..size).step_by(stride) {
            let (l, r) = (i + half - 1, i + stride - 1);
            let left = buf[l];
            buf[l] = buf[r];
            buf[r] = buf[r].then(left);
        }
        stride = half;
    }
    buf.truncate(n);
    buf
}

/// Steps per block of the blocked scan; a lane's block fits in L1.
const BLOCK: usize = 1024;

/// Same result as [`super::scan_sequential`], computed with one prefix scan
/// per `(channel, state)` lane. Long lanes are scanned in three phases:
/// reduce every block to one map, scan the block totals, then rescan each
/// block from its carry-in. Every phase is a Blelloch scan or a per-block
/// reduction, so the work stays linear while each block stays in cache.
/// Channels run on the rayon pool; each output column is produced by
/// exactly one task and summed over states in a fixed order, so the result
/// does not depend on the worker count.
pub fn scan_parallel<T: Scalar>(params: &StepParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    params.check_input(x)?;
    let (len, d_dim, n_dim) = (params.len, params.channels, params.state);
    let xs = x.data();
    let blocks: Vec<(usize, usize)> = (0..len).step_by(BLOCK).map(|t0| (t0, (t0 + BLOCK).min(len))).collect();
    // lane-major copy of one block, read contiguously from the step params
    let gather = |d: usize, (t0, t1): (usize, usize), lanes: &mut Vec<Affine<T>>| {
        let b = t1 - t0;
        lanes.clear();
        lanes.resize(n_dim * b, Affine::identity());
        for t in t0..t1 {
            let xv = xs[t * d_dim + d];
            for n in 0..n_dim {
                lanes[n * b + t - t0] = params.step_map(t, d, n, xv);
            }
        }
    };
    let columns: Vec<Vec<T>> = (0..d_dim)
        .into_par_iter()
        .map(|d| {
            let mut lanes = Vec::new();
            // phase 1: block totals, totals[n][k]
            let mut totals = vec![Vec::with_capacity(blocks.len()); n_dim];
            if blocks.len() > 1 {
                for &blk in &blocks {
                    gather(d, blk, &mut lanes);
                    for (n, lane) in lanes.chunks(blk.1 - blk.0).enumerate() {
                        totals[n].push(lane.iter().fold(Affine::identity(), |acc, &e| acc.then(e)));
                    }
                }
            }
            // phase 2: carry into each block
            let carries: Vec<Vec<Affine<T>>> = totals
                .iter()
                .map(|t| if t.is_empty() { vec![Affine::identity()] } else { exclusive_scan(t) })
                .collect();
            // phase 3: rescan every block from its carry
            let mut col = vec![T::zero(); len];
            for (k, &blk) in blocks.iter().enumerate() {
                gather(d, blk, &mut lanes);
                for (n, lane) in lanes.chunks(blk.1 - blk.0).enumerate() {
                    let carry = carries[n][k];
                    for (i, p) in exclusive_scan(lane).into_iter().enumerate() {
                        let t = blk.0 + i;
                        col[t] += params.c[t * n_dim + n] * carry.then(p).then(lane[i]).b;
                    }
                }
            }
            col
        })
        .collect();
    let mut y = vec![T::zero(); len * d_dim];
    for (d, col) in columns.iter().enumerate() {
        for (t, &v) in col.iter().enumerate() {
            y[t * d_dim + d] = v;
        }
    }
    Ok(Tensor::new(&[len, d_dim], y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn aff() -> impl Strategy<Value = Affine<f64>> {
        (-2.0f64..2.0, -5.0f64..5.0).prop_map(|(a, b)| Affine { a, b })
    }

    proptest! {
        #[test]
        fn composition_is_associative(x in aff(), y in aff(), z in aff()) {
            let l = x.then(y).then(z);
            let r = x.then(y.then(z));
            prop_assert!((l.a - r.a).abs() < 1e-12);
            prop_assert!((l.b - r.b).abs() < 1e-12);
        }

        #[test]
        fn scan_matches_fold(elems in prop::collection::vec(aff(), 1..40)) {
            let prefix = exclusive_scan(&elems);
            let mut acc = Affine::<f64>::identity();
            for (p, e) in prefix.iter().zip(&elems) {
                prop_assert!((p.a - acc.a).abs() < 1e-9 * (1.0 + acc.a.abs()));
                prop_assert!((p.b - acc.b).abs() < 1e-9 * (1.0 + acc.b.abs()));
                acc = acc.then(*e);
            }
        }
    }

    #[test]
    fn blocked_scan_matches_sequential_across_blocks() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let ssm =
            super::super::StaticSsm::new(vec![-0.2, -1.0, -2.5], vec![1.0, -0.4, 0.8], vec![0.3, 0.9, -0.6], 0.05)
                .unwrap();
        for len in [BLOCK - 1, BLOCK, BLOCK + 1, 2 * BLOCK + 477] {
            let p = ssm.steps(len, 2).unwrap();
            let x = Tensor::<f64>::randn(&[len, 2], 1.0, &mut rng).unwrap();
            let e = super::super::scan_sequential(&p, &x).unwrap().max_abs_diff(&scan_parallel(&p, &x).unwrap());
            assert!(e < 1e-10, "L = {len}: {e}");
        }
    }

    #[test]
    fn identity_is_neutral() {
        let m = Affine { a: 0.3f64, b: -1.5 };
        assert_eq!(Affine::identity().then(m), m);
        assert_eq!(m.then(Affine::identity()), m);
        assert!(exclusive_scan::<f64>(&[]).is_empty());
    }
}
