//! Global matching: all-pairs cost volume, softmax matching distribution
//! and the expected-coordinate initial flow. Everything is built from tape
//! ops so gradients reach the features.
//!
//! Coordinates are `(x, y)` = (column, row); flow is stored `(dx, dy)`.

use thiserror::Error;

use crate::autograd::Var;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Default cap on `H·W` for the `O((H·W)²)` cost volume.
pub const DEFAULT_CAPACITY: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("cost volume over {pixels} pixels exceeds the capacity of {capacity}")]
    Capacity { pixels: usize, capacity: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = MatchError> = std::result::Result<T, E>;

/// `G[i, j] = (j, i)`, shape `[H, W, 2]`.
pub fn coordinate_grid<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[h, w, 2], |idx| {
        let pix = idx / 2;
        let v = if idx % 2 == 0 { pix % w } else { pix / w };
        T::from_usize_lossy(v)
    })
    .expect("non-empty grid")
}

fn dims<T: Scalar>(f: Var<'_, T>) -> Result<(usize, usize, usize)> {
    match f.shape()[..] {
        [h, w, d] => Ok((h, w, d)),
        _ => Err(TensorError::Rank { op: "matching features", expected: 3, shape: f.shape() }.into()),
    }
}

/// `cost[i, j, k, l] = ⟨F_q[i, j], F_v[k, l]⟩ / √D`, shape `[H, W, H, W]`.
pub fn build_cost_volume<'t, T: Scalar>(fq: Var<'t, T>, fv: Var<'t, T>, capacity: usize) -> Result<Var<'t, T>> {
    let (h, w, d) = dims(fq)?;
    if fv.shape() != fq.shape() {
        return Err(TensorError::ShapeMismatch { op: "cost volume", left: fq.shape(), right: fv.shape() }.into());
    }
    let p = h * w;
    if p > capacity {
        return Err(MatchError::Capacity { pixels: p, capacity });
    }
    let q = fq.reshape(&[p, d])?;
    let v = fv.reshape(&[p, d])?;
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    Ok(q.matmul(v.transpose()?)?.scale(scale).reshape(&[h, w, h, w])?)
}

/// Softmax over the target pixel axes `(k, l)` jointly.
pub fn matching_distribution<'t, T: Scalar>(cost: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(cost.softmax(&[2, 3])?)
}

/// `V = M G − G`, shape `[H, W, 2]`.
pub fn initial_flow<'t, T: Scalar>(m: Var<'t, T>) -> Result<Var<'t, T>> {
    let (h, w) = match m.shape()[..] {
        [h, w, h2, w2] if h == h2 && w == w2 => (h, w),
        _ => return Err(TensorError::Rank { op: "initial_flow", expected: 4, shape: m.shape() }.into()),
    };
    let p = h * w;
    let grid = m.tape().constant(coordinate_grid(h, w).reshape(&[p, 2])?);
    let expected = m.reshape(&[p, p])?.matmul(grid)?;
    Ok(expected.sub(grid)?.reshape(&[h, w, 2])?)
}

pub struct GlobalMatch<'t, T> {
    pub flow: Var<'t, T>,
    pub cost: Var<'t, T>,
    pub distribution: Var<'t, T>,
}

pub fn global_match<'t, T: Scalar>(fq: Var<'t, T>, fv: Var<'t, T>, capacity: usize) -> Result<GlobalMatch<'t, T>> {
    let cost = build_cost_volume(fq, fv, capacity)?;
    let distribution = matching_distribution(cost)?;
    let flow = initial_flow(distribution)?;
    Ok(GlobalMatch { flow, cost, distribution })
}

/// Random orthonormal codes, one per pixel (`D = H·W`), scaled so that the
/// cost of a matching pair is `scale` and every other pair costs 0.
pub fn orthonormal_codes<T: Scalar, R: rand::Rng>(h: usize, w: usize, scale: f64, rng: &mut R) -> Tensor<T> {
    use rand::seq::SliceRandom;
    let p = h * w;
    let mut perm: Vec<usize> = (0..p).collect();
    perm.shuffle(rng);
    // ⟨a·e_i, a·e_i⟩/√D = scale  ⇒  a² = scale·√D
    let amp = (scale * (p as f64).sqrt()).sqrt();
    let mut data = vec![T::zero(); p * p];
    for (pix, &code) in perm.iter().enumerate() {
        data[pix * p + code] = T::from_f64_lossy(amp);
    }
    Tensor::new(&[h, w, p], data).expect("shape matches")
}

/// `out[i, j] = f[(i − dy) mod H, (j − dx) mod W]`: content moves by `(dx, dy)`.
pub fn cyclic_shift<T: Scalar>(f: &Tensor<T>, dx: isize, dy: isize) -> Tensor<T> {
    let (h, w, d) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    Tensor::from_fn(f.shape(), |idx| {
        let (pix, c) = (idx / d, idx % d);
        let (i, j) = ((pix / w) as isize, (pix % w) as isize);
        let si = (i - dy).rem_euclid(h as isize) as usize;
        let sj = (j - dx).rem_euclid(w as isize) as usize;
        f.data()[(si * w + sj) * d + c]
    })
    .expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_convention() {
        let g = coordinate_grid::<f64>(2, 3);
        assert_eq!(g.get(&[1, 2, 0]), 2.0);
        assert_eq!(g.get(&[1, 2, 1]), 1.0);
    }

    #[test]
    fn cost_oracles() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::ones(&[2, 3, 1]).unwrap());
        let c = build_cost_volume(ones, ones, DEFAULT_CAPACITY).unwrap();
        assert!(c.value().data().iter().all(|&v| v == 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (fq, fv) =
            (Tensor::randn(&[3, 2, 5], 1.0, &mut rng).unwrap(), Tensor::randn(&[3, 2, 5], 1.0, &mut rng).unwrap());
        let c = build_cost_volume(tape.constant(fq.clone()), tape.constant(fv.clone()), 100).unwrap().value();
        for a in 0..6 {
            for b in 0..6 {
                let dot: f64 = (0..5).map(|k| fq.data()[a * 5 + k] * fv.data()[b * 5 + k]).sum();
                assert!((c.data()[a * 6 + b] - dot / 5f64.sqrt()).abs() < 1e-12);
            }
        }

        let codes = orthonormal_codes::<f64, _>(2, 2, 0.5, &mut rng);
        let c = build_cost_volume(tape.constant(codes.clone()), tape.constant(codes), 100).unwrap().value();
        for a in 0..4 {
            for b in 0..4 {
                let e = if a == b { 0.5 } else { 0.0 };
                assert!((c.data()[a * 4 + b] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn capacity_guard() {
        let tape = Tape::<f32>::new();
        let f = tape.constant(Tensor::zeros(&[5, 5, 1]).unwrap());
        assert_eq!(build_cost_volume(f, f, 24).err(), Some(MatchError::Capacity { pixels: 25, capacity: 24 }));
    }

    #[test]
    fn uniform_distribution_gives_centroid_flow() {
        let tape = Tape::<f64>::new();
        let cost = tape.constant(Tensor::zeros(&[3, 4, 3, 4]).unwrap());
        let m = matching_distribution(cost).unwrap();
        assert!(m.value().data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
        let v = initial_flow(m).unwrap().value();
        // centroid (1.5, 1.0)
        assert!((v.get(&[0, 0, 0]) - 1.5).abs() < 1e-12 && (v.get(&[0, 0, 1]) - 1.0).abs() < 1e-12);
        assert!((v.get(&[2, 3, 0]) + 1.5).abs() < 1e-12 && (v.get(&[2, 3, 1]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_shift_distribution() {
        let (h, w) = (3, 5);
        let p = h * w;
        let mut m = vec![0.0f64; p * p];
        for i in 0..h {
            for j in 0..w {
                let tj = (j + 2).min(w - 1);
                m[(i * w + j) * p + i * w + tj] = 1.0;
            }
        }
        let tape = Tape::new();
        let v = initial_flow(tape.constant(Tensor::new(&[h, w, h, w], m).unwrap())).unwrap().value();
        for i in 0..h {
            for j in 0..w - 2 {
                assert_eq!(v.get(&[i, j, 0]), 2.0);
                assert_eq!(v.get(&[i, j, 1]), 0.0);
            }
        }
    }

    #[test]
    fn shifted_codes_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w) = (6, 7);
        let fq = orthonormal_codes::<f64, _>(h, w, 50.0, &mut rng);
        let fv = cyclic_shift(&fq, 2, -1);
        let tape = Tape::new();
        let gm = global_match(tape.constant(fq), tape.constant(fv), DEFAULT_CAPACITY).unwrap();
        let v = gm.flow.value();
        for i in 1..h {
            for j in 0..w - 2 {
                assert!((v.get(&[i, j, 0]) - 2.0).abs() < 0.1);
                assert!((v.get(&[i, j, 1]) + 1.0).abs() < 0.1);
            }
        }
    }
}
