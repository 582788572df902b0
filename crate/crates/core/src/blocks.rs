//! Bidirectional selective-scan blocks over `[L, D]` sequences.
//!
//! [`SelfMamba`] is the gated block: input projection to two width-`E`
//! streams, causal depthwise conv + SiLU on one, a selective scan whose
//! `Δ, B, C` come from the convolved stream, SiLU gating by the other
//! stream, and an output projection back to `D`.
//!
//! [`CrossMamba`] scans the first stream with parameters computed from both
//! streams. Its scan runs at the model width `D`.

use crate::autograd::Var;
use crate::nn::{Bound, CausalConv1d, Init, Linear, ParamId};
use crate::scalar::Scalar;
use crate::ssm::{init_dt_bias, init_log_neg_a};
use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_CONV_WIDTH: usize = 4;
const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MambaConfig {
    pub d_model: usize,
    /// Inner width `E = expand · D`.
    pub expand: usize,
    pub d_state: usize,
    /// Width of the causal depthwise convolution.
    pub conv_width: usize,
    /// Rank of the `Δ` projection; 0 picks `ceil(D / 16)`.
    pub dt_rank: usize,
    /// Adds a learned feedthrough `skip ⊙ x` to the scan output.
    pub skip: bool,
    /// Backward direction reuses the forward parameters.
    pub tied: bool,
}

impl MambaConfig {
    pub fn new(d_model: usize, d_state: usize) -> Self {
        Self { d_model, expand: 2, d_state, conv_width: DEFAULT_CONV_WIDTH, dt_rank: 0, skip: false, tied: false }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn rank(&self) -> usize {
        if self.dt_rank == 0 {
            self.d_model.div_ceil(16)
        } else {
            self.dt_rank
        }
    }
}

fn dt_bias<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize) -> ParamId {
    let bias = init_dt_bias(dim, DT_MIN, DT_MAX, init.rng);
    init.tensor(name, Tensor::from_f64(&[dim], &bias).expect("non-empty"))
}

fn check_seq<T: Scalar>(x: Var<'_, T>, width: usize, op: &'static str) -> Result<()> {
    let s = x.shape();
    if s.len() != 2 || s[1] != width {
        return Err(TensorError::ShapeMismatch { op, left: vec![0, width], right: s });
    }
    Ok(())
}

/// Parameters of one scan direction of [`SelfMamba`].
#[derive(Debug, Clone)]
struct SelfDir {
    in_proj: Linear,
    conv: CausalConv1d,
    x_proj: Linear,
    dt_proj: Linear,
    a_log: ParamId,
    skip: Option<ParamId>,
    out_proj: Linear,
}

impl SelfDir {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &MambaConfig) -> Self {
        let (d, e, n, r) = (cfg.d_model, cfg.inner(), cfg.d_state, cfg.rank());
        let in_proj = Linear::new(init, &format!("{name}.in_proj"), d, 2 * e, false);
        let conv = CausalConv1d::new(init, &format!("{name}.conv"), e, cfg.conv_width);
        let x_proj = Linear::new(init, &format!("{name}.x_proj"), e, r + 2 * n, false);
        let dt_w = init.uniform(&format!("{name}.dt_proj.weight"), &[r, e], 1.0 / (r as f64).sqrt());
        let dt_b = dt_bias(init, &format!("{name}.dt_proj.bias"), e);
        let dt_proj = Linear { weight: dt_w, bias: Some(dt_b), in_dim: r, out_dim: e };
        let a_log = init.tensor(&format!("{name}.a_log"), init_log_neg_a(e, n));
        let skip = cfg.skip.then(|| init.constant(&format!("{name}.skip"), &[e], 1.0));
        let out_proj = Linear::new(init, &format!("{name}.out_proj"), e, d, false);
        Self { in_proj, conv, x_proj, dt_proj, a_log, skip, out_proj }
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, cfg: &MambaConfig, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (e, n, r) = (cfg.inner(), cfg.d_state, cfg.rank());
        let xz = self.in_proj.forward(p, x)?;
        let xs = self.conv.forward(p, xz.slice_last(0, e)?)?.silu();
        let z = xz.slice_last(e, e)?;
        let dbc = self.x_proj.forward(p, xs)?;
        let delta = self.dt_proj.forward(p, dbc.slice_last(0, r)?)?.softplus();
        let b = dbc.slice_last(r, n)?;
        let c = dbc.slice_last(r + n, n)?;
        let a = p.get(self.a_log).exp().neg();
        let y = xs.selective_scan(delta, a, b, c, self.skip.map(|s| p.get(s)))?;
        self.out_proj.forward(p, y.mul(z.silu())?)
    }
}

/// `fwd(F) + reverse(bwd(reverse(F)))`.
#[derive(Debug, Clone)]
pub struct SelfMamba {
    pub config: MambaConfig,
    fwd: SelfDir,
    bwd: Option<SelfDir>,
}

impl SelfMamba {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, config: MambaConfig) -> Self {
        let fwd = SelfDir::new(init, &format!("{name}.fwd"), &config);
        let bwd = (!config.tied).then(|| SelfDir::new(init, &format!("{name}.bwd"), &config));
        Self { config, fwd, bwd }
    }

    /// Only the forward direction.
    pub fn forward_causal<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        check_seq(x, self.config.d_model, "self-mamba input")?;
        self.fwd.forward(p, &self.config, x)
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        check_seq(x, self.config.d_model, "self-mamba input")?;
        let f = self.fwd.forward(p, &self.config, x)?;
        let bwd = self.bwd.as_ref().unwrap_or(&self.fwd);
        let b = bwd.forward(p, &self.config, x.reverse(0)?)?.reverse(0)?;
        f.add(b)
    }
}

#[derive(Debug, Clone)]
struct CrossDir {
    conv: CausalConv1d,
    proj: Linear,
    params: Linear,
    a_log: ParamId,
    out_proj: Linear,
}

impl CrossDir {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &MambaConfig) -> Self {
        let (d, n) = (cfg.d_model, cfg.d_state);
        let conv = CausalConv1d::new(init, &format!("{name}.conv"), d, cfg.conv_width);
        let proj = Linear::new(init, &format!("{name}.proj"), d, d, true);
        let params = Linear::new(init, &format!("{name}.params"), 2 * d, d + 2 * n, true);
        // shift the Δ bias so softplus lands in the usual step range
        let bias = init_dt_bias(d, DT_MIN, DT_MAX, init.rng);
        let bid = params.bias.expect("params has a bias");
        let pb = init.store.param_mut(bid);
        for (v, b) in pb.data_mut().iter_mut().zip(bias) {
            *v = T::from_f64_lossy(b);
        }
        let a_log = init.tensor(&format!("{name}.a_log"), init_log_neg_a(d, n));
        let out_proj = Linear::new(init, &format!("{name}.out_proj"), d, d, true);
        Self { conv, proj, params, a_log, out_proj }
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, n: usize, f1: Var<'t, T>, f2: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = f1.shape()[1];
        let xc = self.conv.forward(p, f1)?.silu();
        let xm = self.proj.forward(p, f2)?;
        let q = self.params.forward(p, Var::concat(&[xc, xm])?)?;
        let delta = q.slice_last(0, d)?.softplus();
        let b = q.slice_last(d, n)?;
        let c = q.slice_last(d + n, n)?;
        let a = p.get(self.a_log).exp().neg();
        let y = xc.selective_scan(delta, a, b, c, None)?;
        self.out_proj.forward(p, y)
    }
}

/// Scans `F1` with `Δ, B, C` conditioned on `[F1; F2]`. Both directions
/// reverse both streams.
#[derive(Debug, Clone)]
pub struct CrossMamba {
    pub d_model: usize,
    pub d_state: usize,
    fwd: CrossDir,
    bwd: Option<CrossDir>,
}

impl CrossMamba {
    /// Uses `d_model`, `d_state`, `conv_width` and `tied` from `cfg`.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &MambaConfig) -> Self {
        let fwd = CrossDir::new(init, &format!("{name}.fwd"), cfg);
        let bwd = (!cfg.tied).then(|| CrossDir::new(init, &format!("{name}.bwd"), cfg));
        Self { d_model: cfg.d_model, d_state: cfg.d_state, fwd, bwd }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, f1: Var<'t, T>, f2: Var<'t, T>) -> Result<Var<'t, T>> {
        check_seq(f1, self.d_model, "cross-mamba first stream")?;
        check_seq(f2, self.d_model, "cross-mamba second stream")?;
        if f1.shape()[0] != f2.shape()[0] {
            return Err(TensorError::ShapeMismatch { op: "cross-mamba streams", left: f1.shape(), right: f2.shape() });
        }
        let f = self.fwd.forward(p, self.d_state, f1, f2)?;
        let bwd = self.bwd.as_ref().unwrap_or(&self.fwd);
        let b = bwd.forward(p, self.d_state, f1.reverse(0)?, f2.reverse(0)?)?.reverse(0)?;
        f.add(b)
    }
}
