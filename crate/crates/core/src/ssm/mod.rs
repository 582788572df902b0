//! State-space kernels: zero-order-hold discretization, the sequential
//! recurrence, the convolutional kernel form, input-dependent (selective)
//! parameters and a work-efficient parallel scan.
//!
//! The state matrix is diagonal, so every `(channel, state)` lane evolves
//! independently:
//!
//! ```text
//! h_t = Ā_t h_{t-1} + B̄_t x_t,   y_t = Σ_n C_t[n] h_t[n]
//! Ā = exp(ΔA),  B̄ = (ΔA)⁻¹(exp(ΔA) − 1) ΔB
//! ```
//!
//! There is no feedthrough term `D x_t`; the taped scan in
//! [`crate::autograd::Var::selective_scan`] offers one as an option.

pub mod bench;
mod parallel;

use thiserror::Error;

pub use parallel::{exclusive_scan, scan_parallel, Affine};

use crate::scalar::Scalar;
use crate::tensor::kernels::{phi1, softplus};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SsmError {
    #[error("time step Δ must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("state matrix entry {index} is {value}; all entries must be negative")]
    UnstableA { index: usize, value: f64 },
    #[error("{what}: expected length {expected}, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("kernel form requires time-invariant parameters; step {step} differs from step 0")]
    TimeVarying { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = SsmError> = std::result::Result<T, E>;

fn expect_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(SsmError::Length { what, expected, got });
    }
    Ok(())
}

/// Continuous-time parameters shared by every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticSsm<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub delta: T,
}

/// Discrete per-state decay and input gain.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

/// Zero-order hold for a diagonal `A`.
///
/// For `|ΔA| < 1e-6` the gain uses its series limit, so tiny steps give
/// `B̄ ≈ ΔB` instead of `0/0`.
pub fn discretize<T: Scalar>(a: &[T], b: &[T], delta: T) -> Result<DiscreteSsm<T>> {
    if !(delta > T::zero()) {
        return Err(SsmError::NonPositiveDelta(delta.to_f64_lossy()));
    }
    expect_len("B", a.len(), b.len())?;
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for (&an, &bn) in a.iter().zip(b) {
        let z = delta * an;
        a_bar.push(z.exp());
        b_bar.push(phi1(z) * delta * bn);
    }
    Ok(DiscreteSsm { a_bar, b_bar })
}

impl<T: Scalar> StaticSsm<T> {
    pub fn new(a: Vec<T>, b: Vec<T>, c: Vec<T>, delta: T) -> Result<Self> {
        for (index, &v) in a.iter().enumerate() {
            if !(v < T::zero()) {
                return Err(SsmError::UnstableA { index, value: v.to_f64_lossy() });
            }
        }
        expect_len("B", a.len(), b.len())?;
        expect_len("C", a.len(), c.len())?;
        if !(delta > T::zero()) {
            return Err(SsmError::NonPositiveDelta(delta.to_f64_lossy()));
        }
        Ok(Self { a, b, c, delta })
    }

    pub fn state_size(&self) -> usize {
        self.a.len()
    }

    pub fn discretize(&self) -> Result<DiscreteSsm<T>> {
        discretize(&self.a, &self.b, self.delta)
    }

    /// Per-step form for `len` steps over `channels` identical channels.
    pub fn steps(&self, len: usize, channels: usize) -> Result<StepParams<T>> {
        let disc = self.discretize()?;
        let n = self.state_size();
        let mut a_bar = Vec::with_capacity(len * channels * n);
        let mut b_bar = Vec::with_capacity(len * channels * n);
        for _ in 0..len * channels {
            a_bar.extend_from_slice(&disc.a_bar);
            b_bar.extend_from_slice(&disc.b_bar);
        }
        let c = (0..len).flat_map(|_| self.c.iter().copied()).collect();
        StepParams::new(len, channels, n, a_bar, b_bar, c)
    }

    /// `K̄ = (C B̄, C Ā B̄, …, C Ā^{len-1} B̄)`.
    pub fn kernel(&self, len: usize) -> Result<Kernel<T>> {
        kernel_form(&self.steps(len, 1)?)
    }
}

/// Discretized parameters for every step: `Ā, B̄` of shape `[L, D, N]`
/// and `C` of shape `[L, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParams<T> {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Scalar> StepParams<T> {
    pub fn new(len: usize, channels: usize, state: usize, a_bar: Vec<T>, b_bar: Vec<T>, c: Vec<T>) -> Result<Self> {
        expect_len("Ā", len * channels * state, a_bar.len())?;
        expect_len("B̄", len * channels * state, b_bar.len())?;
        expect_len("C", len * state, c.len())?;
        Ok(Self { len, channels, state, a_bar, b_bar, c })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != [self.len, self.channels] {
            return Err(SsmError::Tensor(TensorError::ShapeMismatch {
                op: "scan input",
                left: vec![self.len, self.channels],
                right: x.shape().to_vec(),
            }));
        }
        Ok(())
    }

    /// Affine step `h ↦ Ā h + B̄ x` for lane `(d, n)` at step `t`.
    #[inline]
    pub fn step_map(&self, t: usize, d: usize, n: usize, x: T) -> Affine<T> {
        let i = (t * self.channels + d) * self.state + n;
        Affine { a: self.a_bar[i], b: self.b_bar[i] * x }
    }
}

/// The recurrence evaluated step by step from `h₀ = 0`.
pub fn scan_sequential<T: Scalar>(params: &StepParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    scan_sequential_from(params, x, None).map(|(y, _)| y)
}

/// Sequential scan from an optional initial state `[D, N]`; also returns
/// the final state.
pub fn scan_sequential_from<T: Scalar>(
    params: &StepParams<T>,
    x: &Tensor<T>,
    h0: Option<&[T]>,
) -> Result<(Tensor<T>, Vec<T>)> {
    params.check_input(x)?;
    let (d_dim, n_dim) = (params.channels, params.state);
    let mut h = match h0 {
        Some(h0) => {
            expect_len("h₀", d_dim * n_dim, h0.len())?;
            h0.to_vec()
        }
        None => vec![T::zero(); d_dim * n_dim],
    };
    let mut y = vec![T::zero(); params.len * d_dim];
    let xs = x.data();
    for t in 0..params.len {
        let ct = &params.c[t * n_dim..(t + 1) * n_dim];
        let base = t * d_dim * n_dim;
        for d in 0..d_dim {
            let xv = xs[t * d_dim + d];
            let lane = &mut h[d * n_dim..(d + 1) * n_dim];
            let ab = &params.a_bar[base + d * n_dim..base + (d + 1) * n_dim];
            let bb = &params.b_bar[base + d * n_dim..base + (d + 1) * n_dim];
            let mut acc = T::zero();
            for n in 0..n_dim {
                lane[n] = ab[n] * lane[n] + bb[n] * xv;
                acc += ct[n] * lane[n];
            }
            y[t * d_dim + d] = acc;
        }
    }
    Ok((Tensor::new(&[params.len, d_dim], y)?, h))
}

/// Per-channel causal convolution kernel, `taps[d * len + l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel<T> {
    pub len: usize,
    pub channels: usize,
    pub taps: Vec<T>,
}

/// Builds `K̄` from time-invariant step parameters; selective (varying)
/// parameters are rejected.
pub fn kernel_form<T: Scalar>(params: &StepParams<T>) -> Result<Kernel<T>> {
    let (len, d_dim, n_dim) = (params.len, params.channels, params.state);
    let per_step = d_dim * n_dim;
    for t in 1..len {
        let same = params.a_bar[t * per_step..(t + 1) * per_step] == params.a_bar[..per_step]
            && params.b_bar[t * per_step..(t + 1) * per_step] == params.b_bar[..per_step]
            && params.c[t * n_dim..(t + 1) * n_dim] == params.c[..n_dim];
        if !same {
            return Err(SsmError::TimeVarying { step: t });
        }
    }
    let mut taps = vec![T::zero(); d_dim * len];
    for d in 0..d_dim {
        for n in 0..n_dim {
            let a = params.a_bar[d * n_dim + n];
            let mut pow_b = params.b_bar[d * n_dim + n];
            let c = params.c[n];
            for l in 0..len {
                taps[d * len + l] += c * pow_b;
                pow_b *= a;
            }
        }
    }
    Ok(Kernel { len, channels: d_dim, taps })
}

/// `y[t, d] = Σ_{l ≤ t} K̄[d, l] x[t − l, d]`, direct O(L²) evaluation.
pub fn apply_kernel<T: Scalar>(kernel: &Kernel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != [kernel.len, kernel.channels] {
        return Err(SsmError::Tensor(TensorError::ShapeMismatch {
            op: "apply_kernel",
            left: vec![kernel.len, kernel.channels],
            right: x.shape().to_vec(),
        }));
    }
    let (len, d_dim) = (kernel.len, kernel.channels);
    let xs = x.data();
    let mut y = vec![T::zero(); len * d_dim];
    for t in 0..len {
        for d in 0..d_dim {
            let taps = &kernel.taps[d * len..(d + 1) * len];
            let mut acc = T::zero();
            for l in 0..=t {
                acc += taps[l] * xs[(t - l) * d_dim + d];
            }
            y[t * d_dim + d] = acc;
        }
    }
    Ok(Tensor::new(&[len, d_dim], y)?)
}

/// Affine map `x ↦ x W + b` used for the selective projections.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearMap<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(SsmError::Tensor(TensorError::ShapeMismatch {
                op: "linear map",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            }));
        }
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.matmul(&self.weight)?;
        let w = self.out_dim();
        for row in y.data_mut().chunks_mut(w) {
            for (v, &b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(y)
    }
}

/// Projections producing `B_i`, `C_i` (`D → N`) and `Δ_i` (`D → D`).
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveProjections<T> {
    pub s_b: LinearMap<T>,
    pub s_c: LinearMap<T>,
    pub s_delta: LinearMap<T>,
}

/// Input-dependent parameters for a length-`L` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveParams<T> {
    /// `[L, D]`, strictly positive.
    pub delta: Tensor<T>,
    /// `[L, N]`
    pub b: Tensor<T>,
    /// `[L, N]`
    pub c: Tensor<T>,
}

/// `B_i = S_B(x_i)`, `C_i = S_C(x_i)`, `Δ_i = softplus(S_Δ(x_i))`.
pub fn selective_params<T: Scalar>(x: &Tensor<T>, proj: &SelectiveProjections<T>) -> Result<SelectiveParams<T>> {
    if x.rank() != 2 {
        return Err(SsmError::Tensor(TensorError::Rank {
            op: "selective_params",
            expected: 2,
            shape: x.shape().to_vec(),
        }));
    }
    expect_len("S_B output", proj.s_c.out_dim(), proj.s_b.out_dim())?;
    expect_len("S_Δ output", x.shape()[1], proj.s_delta.out_dim())?;
    let b = proj.s_b.apply(x)?;
    let c = proj.s_c.apply(x)?;
    let delta = proj.s_delta.apply(x)?.map(softplus);
    Ok(SelectiveParams { delta, b, c })
}

impl<T: Scalar> SelectiveParams<T> {
    pub fn len(&self) -> usize {
        self.delta.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Discretizes every step against a diagonal `A` of shape `[D, N]`.
    pub fn discretize(&self, a: &Tensor<T>) -> Result<StepParams<T>> {
        let (len, d_dim) = (self.delta.shape()[0], self.delta.shape()[1]);
        let n_dim = self.b.shape()[1];
        if a.shape() != [d_dim, n_dim] {
            return Err(SsmError::Tensor(TensorError::ShapeMismatch {
                op: "selective discretize",
                left: vec![d_dim, n_dim],
                right: a.shape().to_vec(),
            }));
        }
        let mut a_bar = Vec::with_capacity(len * d_dim * n_dim);
        let mut b_bar = Vec::with_capacity(len * d_dim * n_dim);
        for t in 0..len {
            let bt = &self.b.data()[t * n_dim..(t + 1) * n_dim];
            for d in 0..d_dim {
                let dt = self.delta.data()[t * d_dim + d];
                let arow = &a.data()[d * n_dim..(d + 1) * n_dim];
                let disc = discretize(arow, bt, dt)?;
                a_bar.extend(disc.a_bar);
                b_bar.extend(disc.b_bar);
            }
        }
        StepParams::new(len, d_dim, n_dim, a_bar, b_bar, self.c.data().to_vec())
    }
}

/// `log(-A)` initial values: `A[d, n] = -(n + 1)` for every channel.
pub fn init_log_neg_a<T: Scalar>(channels: usize, state: usize) -> Tensor<T> {
    Tensor::from_fn(&[channels, state], |i| T::from_usize_lossy(i % state + 1).ln()).expect("non-empty")
}

/// Bias whose softplus is `dt`.
pub fn inverse_softplus(dt: f64) -> f64 {
    dt + (-(-dt).exp_m1()).ln()
}

/// Δ-projection bias drawn so that `softplus(bias)` is log-uniform in
/// `[dt_min, dt_max]`.
pub fn init_dt_bias<R: rand::Rng>(channels: usize, dt_min: f64, dt_max: f64, rng: &mut R) -> Vec<f64> {
    (0..channels)
        .map(|_| {
            let dt = rng.gen_range(dt_min.ln()..dt_max.ln()).exp();
            inverse_softplus(dt)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn discretize_hand_values() {
        let d = discretize(&[-1.0f64], &[1.0], 2f64.ln()).unwrap();
        assert!((d.a_bar[0] - 0.5).abs() < 1e-15);
        // (0.5 − 1)/(−ln2) · ln2 = 0.5
        assert!((d.b_bar[0] - 0.5).abs() < 1e-15);

        let tiny = discretize(&[-1.0f64], &[1.0], 1e-9).unwrap();
        assert!(tiny.b_bar[0].is_finite());
        assert!((tiny.b_bar[0] - 1e-9).abs() < 1e-17);
        assert!((tiny.a_bar[0] - 1.0).abs() < 1e-8);

        let small = discretize(&[-3.0f64], &[2.0], 1e-12).unwrap();
        assert!(small.b_bar[0] < 1e-11 && small.a_bar[0] > 1.0 - 1e-11);

        assert!(matches!(discretize(&[-1.0f64], &[1.0], 0.0), Err(SsmError::NonPositiveDelta(_))));
        assert!(matches!(discretize(&[-1.0f64], &[1.0], -0.1), Err(SsmError::NonPositiveDelta(_))));
    }

    fn half_half(len: usize) -> StepParams<f64> {
        StepParams::new(len, 1, 1, vec![0.5; len], vec![0.5; len], vec![1.0; len]).unwrap()
    }

    #[test]
    fn sequential_hand_unrolled() {
        let y = scan_sequential(&half_half(3), &t(&[3, 1], &[1., 1., 1.])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.75, 0.875]);
        let z = scan_sequential(&half_half(3), &Tensor::zeros(&[3, 1]).unwrap()).unwrap();
        assert_eq!(z.data(), &[0.0; 3]);
    }

    #[test]
    fn memoryless_when_a_bar_zero() {
        let p = StepParams::new(4, 1, 1, vec![0.0; 4], vec![0.3; 4], vec![2.0; 4]).unwrap();
        let x = t(&[4, 1], &[1., -2., 3., 0.5]);
        let y = scan_sequential(&p, &x).unwrap();
        for (yy, xx) in y.data().iter().zip(x.data()) {
            assert!((yy - 0.6 * xx).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_hand_values_and_equivalence() {
        let k = kernel_form(&half_half(3)).unwrap();
        assert_eq!(k.taps, vec![0.5, 0.25, 0.125]);
        let y = apply_kernel(&k, &t(&[3, 1], &[1., 1., 1.])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.75, 0.875]);

        let zero_c = StepParams::new(3, 1, 1, vec![0.5; 3], vec![0.5; 3], vec![0.0; 3]).unwrap();
        assert!(kernel_form(&zero_c).unwrap().taps.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_rejects_selective_params() {
        let mut p = half_half(4);
        p.b_bar[2] = 0.1;
        assert!(matches!(kernel_form(&p), Err(SsmError::TimeVarying { step: 2 })));
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let err = scan_sequential(&half_half(3), &Tensor::zeros(&[4, 1]).unwrap()).unwrap_err();
        assert!(matches!(err, SsmError::Tensor(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn static_ssm_validation() {
        assert!(matches!(
            StaticSsm::new(vec![-1.0f64, 0.0], vec![1.0; 2], vec![1.0; 2], 0.1),
            Err(SsmError::UnstableA { index: 1, .. })
        ));
        assert!(StaticSsm::new(vec![-1.0f64], vec![1.0], vec![1.0], 0.0).is_err());
    }

    fn zero_proj(d: usize, n: usize, delta_bias: f64) -> SelectiveProjections<f64> {
        let lm =
            |o: usize, b: f64| LinearMap::new(Tensor::zeros(&[d, o]).unwrap(), Tensor::full(&[o], b).unwrap()).unwrap();
        SelectiveProjections { s_b: lm(n, 0.3), s_c: lm(n, -0.2), s_delta: lm(d, delta_bias) }
    }

    #[test]
    fn selective_constant_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng).unwrap();
        let sp = selective_params(&x, &zero_proj(3, 2, 0.4)).unwrap();
        for &v in sp.delta.data() {
            assert!((v - softplus(0.4)).abs() < 1e-15);
        }
        assert!(sp.b.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn selective_is_position_wise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, d, n) = (6, 3, 4);
        let rand_map = |o: usize, rng: &mut ChaCha8Rng| {
            LinearMap::new(Tensor::randn(&[d, o], 1.0, rng).unwrap(), Tensor::randn(&[o], 1.0, rng).unwrap()).unwrap()
        };
        let proj = SelectiveProjections {
            s_b: rand_map(n, &mut rng),
            s_c: rand_map(n, &mut rng),
            s_delta: rand_map(d, &mut rng),
        };
        let x = Tensor::<f64>::randn(&[l, d], 2.0, &mut rng).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = Tensor::from_fn(&[l, d], |i| x.data()[perm[i / d] * d + i % d]).unwrap();
        let a = selective_params(&x, &proj).unwrap();
        let b = selective_params(&xp, &proj).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b.delta.data()[i * d..(i + 1) * d], a.delta.data()[p * d..(p + 1) * d]);
            assert_eq!(b.c.data()[i * n..(i + 1) * n], a.c.data()[p * n..(p + 1) * n]);
        }
        assert!(a.delta.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn dt_bias_lands_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for b in init_dt_bias(200, 1e-3, 1e-1, &mut rng) {
            let dt = softplus(b);
            assert!((1e-3 * (1.0 - 1e-9)..=1e-1 * (1.0 + 1e-9)).contains(&dt), "{dt}");
        }
        let a = init_log_neg_a::<f64>(2, 3);
        let neg: Vec<f64> = a.data().iter().map(|v| -v.exp()).collect();
        for (x, e) in neg.iter().zip([-1., -2., -3., -1., -2., -3.]) {
            assert!((x - e).abs() < 1e-12);
        }
    }
}
