//! Forward and backward numeric kernels on flat row-major buffers.
//!
//! These are the bodies of the taped primitives. They do no shape
//! validation beyond debug assertions; the callers in `autograd` check
//! shapes before dispatching here.

use crate::scalar::Scalar;
use crate::tensor::{strides_of, Result, TensorError};

// ---------------------------------------------------------------------------
// Axis grouping (softmax, reverse)

/// Offsets splitting a tensor into groups over a set of axes.
///
/// Element `bases[g] + members[m]` is member `m` of group `g`.
#[derive(Debug, Clone)]
pub(crate) struct AxisGroups {
    pub bases: Vec<usize>,
    pub members: Vec<usize>,
}

fn offsets_over(shape: &[usize], strides: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut out = vec![0usize];
    for &ax in axes {
        let mut next = Vec::with_capacity(out.len() * shape[ax]);
        for &base in &out {
            for i in 0..shape[ax] {
                next.push(base + i * strides[ax]);
            }
        }
        out = next;
    }
    out
}

pub(crate) fn axis_groups(shape: &[usize], axes: &[usize]) -> Result<AxisGroups> {
    if axes.is_empty() {
        return Err(TensorError::EmptyAxes);
    }
    let rank = shape.len();
    let mut seen = vec![false; rank];
    for &ax in axes {
        if ax >= rank {
            return Err(TensorError::InvalidAxis { axis: ax, rank });
        }
        if seen[ax] {
            return Err(TensorError::DuplicateAxis(ax));
        }
        seen[ax] = true;
    }
    let strides = strides_of(shape);
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    let others: Vec<usize> = (0..rank).filter(|a| !seen[*a]).collect();
    Ok(AxisGroups { bases: offsets_over(shape, &strides, &others), members: offsets_over(shape, &strides, &sorted) })
}

pub(crate) fn softmax_forward<T: Scalar>(x: &[T], groups: &AxisGroups) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for &base in &groups.bases {
        let max = groups.members.iter().fold(T::neg_infinity(), |m, &o| m.max(x[base + o]));
        let mut total = T::zero();
        for &o in &groups.members {
            let e = (x[base + o] - max).exp();
            y[base + o] = e;
            total += e;
        }
        let inv = T::one() / total;
        for &o in &groups.members {
            y[base + o] *= inv;
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], groups: &AxisGroups) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for &base in &groups.bases {
        let dot: T = groups.members.iter().map(|&o| y[base + o] * dy[base + o]).sum();
        for &o in &groups.members {
            dx[base + o] = y[base + o] * (dy[base + o] - dot);
        }
    }
    dx
}

/// Permutation that reverses `axis`; it is its own inverse.
pub(crate) fn reverse_permutation(shape: &[usize], axis: usize) -> Vec<usize> {
    let strides = strides_of(shape);
    let n: usize = shape.iter().product();
    let extent = shape[axis];
    let stride = strides[axis];
    (0..n)
        .map(|i| {
            let k = (i / stride) % extent;
            i - k * stride + (extent - 1 - k) * stride
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Elementwise activations

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Gelu,
    Softplus,
    Exp,
    Abs,
    Sigmoid,
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

// tanh approximation of GELU
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + three * k * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

impl Unary {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => gelu_parts(x).0,
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Abs => x.abs(),
            Unary::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at input `x`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Gelu => gelu_parts(x).1,
            Unary::Softplus => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Abs => x.signum() * if x == T::zero() { T::zero() } else { T::one() },
            Unary::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Depthwise causal 1-D convolution: x [L, D], kernel [D, k], bias [D]

pub(crate) fn conv1d_causal_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    len: usize,
    dim: usize,
    width: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); len * dim];
    for t in 0..len {
        for d in 0..dim {
            let mut acc = bias[d];
            for j in 0..width {
                // tap j reads x[t - (width-1) + j]
                if let Some(s) = (t + j).checked_sub(width - 1) {
                    acc += kernel[d * width + j] * x[s * dim + d];
                }
            }
            y[t * dim + d] = acc;
        }
    }
    y
}

pub(crate) fn conv1d_causal_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    len: usize,
    dim: usize,
    width: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); len * dim];
    let mut dk = vec![T::zero(); dim * width];
    let mut db = vec![T::zero(); dim];
    for t in 0..len {
        for d in 0..dim {
            let g = dy[t * dim + d];
            db[d] += g;
            for j in 0..width {
                if let Some(s) = (t + j).checked_sub(width - 1) {
                    dx[s * dim + d] += kernel[d * width + j] * g;
                    dk[d * width + j] += x[s * dim + d] * g;
                }
            }
        }
    }
    (dx, dk, db)
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation): x [H, W, Cin], kernel [kh, kw, Cin, Cout]

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 || input[2] != kernel[2] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", left: input.to_vec(), right: kernel.to_vec() });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        let (h, w, cin) = (input[0], input[1], input[2]);
        let (kh, kw, cout) = (kernel[0], kernel[1], kernel[3]);
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw {
            return Err(TensorError::NonPositiveExtent { op: "conv2d", input: input.to_vec() });
        }
        Ok(Self {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Source pixel for output `(oy, ox)` and tap `(ky, kx)`, if in bounds.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let patch = self.patch();
        let mut cols = vec![T::zero(); self.ho * self.wo * patch];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = (oy * self.wo + ox) * patch;
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                            let dst = row + (ky * self.kw + kx) * self.cin;
                            let src = (y * self.w + xx) * self.cin;
                            cols[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let patch = self.patch();
        let mut dx = vec![T::zero(); self.h * self.w * self.cin];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = (oy * self.wo + ox) * patch;
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                            let src = row + (ky * self.kw + kx) * self.cin;
                            let dst = (y * self.w + xx) * self.cin;
                            for c in 0..self.cin {
                                dx[dst + c] += cols[src + c];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Scalar>(&self, x: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
        let rows = self.ho * self.wo;
        let patch = self.patch();
        let mut out = vec![T::zero(); rows * self.cout];
        if let Some(b) = bias {
            for r in 0..rows {
                out[r * self.cout..(r + 1) * self.cout].copy_from_slice(b);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0 {
            T::gemm(rows, patch, self.cout, T::one(), x, patch, 1, kernel, self.cout, 1, beta, &mut out, self.cout, 1);
        } else {
            let cols = self.im2col(x);
            T::gemm(
                rows,
                patch,
                self.cout,
                T::one(),
                &cols,
                patch,
                1,
                kernel,
                self.cout,
                1,
                beta,
                &mut out,
                self.cout,
                1,
            );
        }
        out
    }

    /// Returns `(dx, dkernel, dbias)`.
    pub fn backward<T: Scalar>(&self, x: &[T], kernel: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let rows = self.ho * self.wo;
        let patch = self.patch();
        let pointwise = self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0;
        let cols_owned;
        let cols: &[T] = if pointwise {
            x
        } else {
            cols_owned = self.im2col(x);
            &cols_owned
        };
        // dK = colsᵀ · dy
        let mut dk = vec![T::zero(); patch * self.cout];
        T::gemm(patch, rows, self.cout, T::one(), cols, 1, patch, dy, self.cout, 1, T::zero(), &mut dk, self.cout, 1);
        // dcols = dy · Kᵀ
        let mut dcols = vec![T::zero(); rows * patch];
        T::gemm(
            rows,
            self.cout,
            patch,
            T::one(),
            dy,
            self.cout,
            1,
            kernel,
            1,
            self.cout,
            T::zero(),
            &mut dcols,
            patch,
            1,
        );
        let dx = if pointwise { dcols } else { self.col2im(&dcols) };
        let mut db = vec![T::zero(); self.cout];
        for r in 0..rows {
            for (acc, &g) in db.iter_mut().zip(&dy[r * self.cout..(r + 1) * self.cout]) {
                *acc += g;
            }
        }
        (dx, dk, db)
    }
}

// ---------------------------------------------------------------------------
// Zero-order hold helpers

/// `(exp(z) - 1) / z`, continuous through `z = 0`.
#[inline]
pub fn phi1<T: Scalar>(z: T) -> T {
    if z.abs() < T::from_f64_lossy(1e-6) {
        T::one() + z * T::from_f64_lossy(0.5)
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi1`].
#[inline]
pub fn phi1_prime<T: Scalar>(z: T) -> T {
    if z.abs() < T::from_f64_lossy(1e-2) {
        T::from_f64_lossy(0.5)
            + z * (T::from_f64_lossy(1.0 / 3.0)
                + z * (T::from_f64_lossy(1.0 / 8.0) + z * T::from_f64_lossy(1.0 / 30.0)))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

// ---------------------------------------------------------------------------
// Selective scan with zero-order-hold discretization.
//
// x, delta: [L, E]; a: [E, N]; b, c: [L, N]; skip: [E]
// h_t[e,n] = exp(Δ a) h_{t-1}[e,n] + φ(Δ a) Δ b_t[n] x_t[e]
// y_t[e]   = Σ_n c_t[n] h_t[e,n] + skip[e] x_t[e]

#[derive(Debug, Clone, Copy)]
pub(crate) struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

pub(crate) struct ScanInputs<'a, T> {
    pub x: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub skip: Option<&'a [T]>,
}

/// Returns `(y, states)` where `states[t]` is `h_t` flattened `[E, N]`.
pub(crate) fn selective_scan_forward<T: Scalar>(dims: ScanDims, inp: &ScanInputs<'_, T>) -> (Vec<T>, Vec<T>) {
    let ScanDims { len, channels: e_dim, state: n_dim } = dims;
    let mut y = vec![T::zero(); len * e_dim];
    let mut states = vec![T::zero(); len * e_dim * n_dim];
    let mut h = vec![T::zero(); e_dim * n_dim];
    for t in 0..len {
        let bt = &inp.b[t * n_dim..(t + 1) * n_dim];
        let ct = &inp.c[t * n_dim..(t + 1) * n_dim];
        for e in 0..e_dim {
            let dt = inp.delta[t * e_dim + e];
            let xv = inp.x[t * e_dim + e];
            let hrow = &mut h[e * n_dim..(e + 1) * n_dim];
            let arow = &inp.a[e * n_dim..(e + 1) * n_dim];
            let mut acc = T::zero();
            for n in 0..n_dim {
                let z = dt * arow[n];
                let bbar = phi1(z) * dt * bt[n];
                hrow[n] = z.exp() * hrow[n] + bbar * xv;
                acc += ct[n] * hrow[n];
            }
            if let Some(skip) = inp.skip {
                acc += skip[e] * xv;
            }
            y[t * e_dim + e] = acc;
        }
        states[t * e_dim * n_dim..(t + 1) * e_dim * n_dim].copy_from_slice(&h);
    }
    (y, states)
}

pub(crate) struct ScanGrads<T> {
    pub dx: Vec<T>,
    pub ddelta: Vec<T>,
    pub da: Vec<T>,
    pub db: Vec<T>,
    pub dc: Vec<T>,
    pub dskip: Vec<T>,
}

pub(crate) fn selective_scan_backward<T: Scalar>(
    dims: ScanDims,
    inp: &ScanInputs<'_, T>,
    states: &[T],
    dy: &[T],
) -> ScanGrads<T> {
    let ScanDims { len, channels: e_dim, state: n_dim } = dims;
    let en = e_dim * n_dim;
    let mut g = ScanGrads {
        dx: vec![T::zero(); len * e_dim],
        ddelta: vec![T::zero(); len * e_dim],
        da: vec![T::zero(); en],
        db: vec![T::zero(); len * n_dim],
        dc: vec![T::zero(); len * n_dim],
        dskip: vec![T::zero(); e_dim],
    };
    // gradient flowing into h_t from later steps
    let mut carry = vec![T::zero(); en];
    for t in (0..len).rev() {
        let bt = &inp.b[t * n_dim..(t + 1) * n_dim];
        let ct = &inp.c[t * n_dim..(t + 1) * n_dim];
        let h_now = &states[t * en..(t + 1) * en];
        for e in 0..e_dim {
            let dyv = dy[t * e_dim + e];
            let dt = inp.delta[t * e_dim + e];
            let xv = inp.x[t * e_dim + e];
            let arow = &inp.a[e * n_dim..(e + 1) * n_dim];
            let mut dx_acc = T::zero();
            let mut ddt_acc = T::zero();
            for n in 0..n_dim {
                let idx = e * n_dim + n;
                let h_prev = if t > 0 { states[(t - 1) * en + idx] } else { T::zero() };
                let gh = carry[idx] + ct[n] * dyv;
                g.dc[t * n_dim + n] += dyv * h_now[idx];
                let a = arow[n];
                let z = dt * a;
                let abar = z.exp();
                let phi = phi1(z);
                let dphi = phi1_prime(z);
                let bbar = phi * dt * bt[n];
                let d_abar = gh * h_prev;
                let d_bbar = gh * xv;
                dx_acc += gh * bbar;
                g.db[t * n_dim + n] += d_bbar * phi * dt;
                ddt_acc += d_abar * a * abar + d_bbar * (dphi * z + phi) * bt[n];
                g.da[idx] += d_abar * dt * abar + d_bbar * dphi * dt * dt * bt[n];
                carry[idx] = gh * abar;
            }
            if let Some(skip) = inp.skip {
                dx_acc += dyv * skip[e];
                g.dskip[e] += dyv * xv;
            }
            g.dx[t * e_dim + e] = dx_acc;
            g.ddelta[t * e_dim + e] = ddt_acc;
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    width: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / width;
    let inv_w = T::one() / T::from_usize_lossy(width);
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for c in 0..width {
            y[r * width + c] = (row[c] - mean) * is * gamma[c] + beta[c];
        }
    }
    (y, inv_std)
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    inv_std: &[T],
    dy: &[T],
    width: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / width;
    let inv_w = T::one() / T::from_usize_lossy(width);
    let mut dx = vec![T::zero(); x.len()];
    let mut dg = vec![T::zero(); width];
    let mut db = vec![T::zero(); width];
    let mut xhat = vec![T::zero(); width];
    let mut dxhat = vec![T::zero(); width];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let is = inv_std[r];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..width {
            let g = dy[r * width + c];
            xhat[c] = (row[c] - mean) * is;
            dxhat[c] = g * gamma[c];
            dg[c] += g * xhat[c];
            db[c] += g;
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xhat[c];
        }
        mean_dxhat *= inv_w;
        mean_dxhat_xhat *= inv_w;
        for c in 0..width {
            dx[r * width + c] = is * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    (dx, dg, db)
}

// ---------------------------------------------------------------------------
// Bilinear sampling with zero padding

/// Corner indices and weights for sampling an `h×w` map at `(x, y)`.
/// Out-of-bounds corners are omitted. Also returns `(∂w/∂x, ∂w/∂y)` per corner.
#[inline]
pub(crate) fn bilinear_taps<T: Scalar>(h: usize, w: usize, x: T, y: T) -> ([(usize, T, T, T); 4], usize) {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let one = T::one();
    let mut taps = [(0usize, T::zero(), T::zero(), T::zero()); 4];
    let mut count = 0;
    let (x0, y0) = match (x0f.to_i64(), y0f.to_i64()) {
        (Some(a), Some(b)) => (a, b),
        _ => return (taps, 0),
    };
    let corners = [
        (x0, y0, (one - fx) * (one - fy), -(one - fy), -(one - fx)),
        (x0 + 1, y0, fx * (one - fy), one - fy, -fx),
        (x0, y0 + 1, (one - fx) * fy, -fy, one - fx),
        (x0 + 1, y0 + 1, fx * fy, fy, fx),
    ];
    for (cx, cy, wgt, dwx, dwy) in corners {
        if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
            taps[count] = (cy as usize * w + cx as usize, wgt, dwx, dwy);
            count += 1;
        }
    }
    (taps, count)
}

/// Local cost lookup. `cost` is `[P, H, W]` (one target map per source pixel
/// `P = H·W`), `flow` is `[H, W, 2]` in feature pixels. Output `[H, W, K]`
/// with `K = (2r+1)²`, window row-major over `(dy, dx)`.
pub(crate) fn lookup_forward<T: Scalar>(cost: &[T], flow: &[T], h: usize, w: usize, radius: usize) -> Vec<T> {
    let side = 2 * radius + 1;
    let k = side * side;
    let p = h * w;
    let mut out = vec![T::zero(); p * k];
    let r = radius as i64;
    for i in 0..h {
        for j in 0..w {
            let src = i * w + j;
            let cx = T::from_usize_lossy(j) + flow[src * 2];
            let cy = T::from_usize_lossy(i) + flow[src * 2 + 1];
            let map = &cost[src * p..(src + 1) * p];
            for oy in -r..=r {
                for ox in -r..=r {
                    let slot = ((oy + r) as usize) * side + (ox + r) as usize;
                    let (taps, count) =
                        bilinear_taps(h, w, cx + T::from_f64_lossy(ox as f64), cy + T::from_f64_lossy(oy as f64));
                    let mut acc = T::zero();
                    for &(idx, wgt, _, _) in &taps[..count] {
                        acc += wgt * map[idx];
                    }
                    out[src * k + slot] = acc;
                }
            }
        }
    }
    out
}

/// Returns `(dcost, dflow)`.
pub(crate) fn lookup_backward<T: Scalar>(
    cost: &[T],
    flow: &[T],
    dy: &[T],
    h: usize,
    w: usize,
    radius: usize,
) -> (Vec<T>, Vec<T>) {
    let side = 2 * radius + 1;
    let k = side * side;
    let p = h * w;
    let mut dcost = vec![T::zero(); cost.len()];
    let mut dflow = vec![T::zero(); flow.len()];
    let r = radius as i64;
    for i in 0..h {
        for j in 0..w {
            let src = i * w + j;
            let cx = T::from_usize_lossy(j) + flow[src * 2];
            let cy = T::from_usize_lossy(i) + flow[src * 2 + 1];
            let map = &cost[src * p..(src + 1) * p];
            for oy in -r..=r {
                for ox in -r..=r {
                    let slot = ((oy + r) as usize) * side + (ox + r) as usize;
                    let g = dy[src * k + slot];
                    if g == T::zero() {
                        continue;
                    }
                    let (taps, count) =
                        bilinear_taps(h, w, cx + T::from_f64_lossy(ox as f64), cy + T::from_f64_lossy(oy as f64));
                    for &(idx, wgt, dwx, dwy) in &taps[..count] {
                        dcost[src * p + idx] += g * wgt;
                        dflow[src * 2] += g * dwx * map[idx];
                        dflow[src * 2 + 1] += g * dwy * map[idx];
                    }
                }
            }
        }
    }
    (dcost, dflow)
}

// ---------------------------------------------------------------------------
// Bilinear resize (half-pixel centers, edge clamped): [H, W, C] -> [H', W', C]

#[derive(Debug, Clone)]
pub(crate) struct ResizePlan {
    pub src_h: usize,
    pub src_w: usize,
    pub dst_h: usize,
    pub dst_w: usize,
    pub channels: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

impl ResizePlan {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize, channels: usize) -> Self {
        Self { src_h, src_w, dst_h, dst_w, channels, rows: axis_taps(src_h, dst_h), cols: axis_taps(src_w, dst_w) }
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, f64)) {
        for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                let dst = oy * self.dst_w + ox;
                f(dst, y0 * self.src_w + x0, (1.0 - fy) * (1.0 - fx));
                f(dst, y0 * self.src_w + x1, (1.0 - fy) * fx);
                f(dst, y1 * self.src_w + x0, fy * (1.0 - fx));
                f(dst, y1 * self.src_w + x1, fy * fx);
            }
        }
    }

    pub fn forward<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let c = self.channels;
        let mut y = vec![T::zero(); self.dst_h * self.dst_w * c];
        self.for_each_tap(|dst, src, wgt| {
            if wgt != 0.0 {
                let wgt = T::from_f64_lossy(wgt);
                for k in 0..c {
                    y[dst * c + k] += wgt * x[src * c + k];
                }
            }
        });
        y
    }

    pub fn backward<T: Scalar>(&self, dy: &[T]) -> Vec<T> {
        let c = self.channels;
        let mut dx = vec![T::zero(); self.src_h * self.src_w * c];
        self.for_each_tap(|dst, src, wgt| {
            if wgt != 0.0 {
                let wgt = T::from_f64_lossy(wgt);
                for k in 0..c {
                    dx[src * c + k] += wgt * dy[dst * c + k];
                }
            }
        });
        dx
    }
}
