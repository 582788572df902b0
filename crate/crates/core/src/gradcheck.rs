//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Each check binds a [`ParamStore`] (inputs included), reduces the output
//! with fixed random weights to a scalar and compares every probed partial
//! derivative with `(f(x + h) − f(x − h)) / 2h` in 64-bit.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::blocks::{CrossMamba, MambaConfig, SelfMamba};
use crate::matching::{global_match, DEFAULT_CAPACITY};
use crate::nn::{Bound, Init, ParamId, ParamStore};
use crate::pipeline::{sequence_loss, FlowModel, ModelConfig};
use crate::polymamba::{PolyConfig, PolyMamba};
use crate::pulse::{Aga, PulseConfig, PulseMamba};
use crate::tensor::{Result, Tensor, TensorError};

pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
/// Partials smaller than this are compared absolutely.
const FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Blocks,
    EndToEnd,
}

impl Scope {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "primitives" => Some(Self::Primitives),
            "blocks" => Some(Self::Blocks),
            "end2end" => Some(Self::EndToEnd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub probes: usize,
    pub max_rel: f64,
    /// Parameter and flat index of the worst partial.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel <= self.tol && self.probes > 0
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "pass" } else { "FAIL" };
        write!(
            f,
            "{verdict} {:<24} probes {:4} max rel err {:.2e} (tol {:.0e})",
            self.name, self.probes, self.max_rel, self.tol
        )?;
        if let (false, Some((p, i))) = (self.passed(), &self.worst) {
            write!(f, " at {p}[{i}]")?;
        }
        Ok(())
    }
}

fn reduce<'t>(out: Var<'t, f64>, weights: &Tensor<f64>) -> Result<Var<'t, f64>> {
    Ok(out.mul(out.tape().constant(weights.clone()))?.sum())
}

/// Compares analytic and numeric partials of `f` with respect to every
/// parameter of `store`, probing at most `per_param` entries of each.
pub fn check<F>(name: &str, store: &ParamStore<f64>, per_param: usize, tol: f64, seed: u64, f: F) -> Result<Check>
where
    F: for<'t> Fn(&Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = f(&p)?;
    let weights = Tensor::uniform(&out.shape(), 0.5, 1.5, &mut rng)?;
    let grads = p.grads(&tape.backward(reduce(out, &weights)?)?);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let p = s.bind_frozen(&tape);
        reduce(f(&p)?, &weights)?.value().item()
    };
    let mut work = store.clone();
    let (mut max_rel, mut worst, mut probes) = (0.0f64, None, 0);
    for (i, g) in grads.iter().enumerate() {
        let len = g.len();
        let picks: Vec<usize> =
            if len <= per_param { (0..len).collect() } else { sample(&mut rng, len, per_param).into_vec() };
        for j in picks {
            let x0 = work.value(i).data()[j];
            work.value_mut(i).data_mut()[j] = x0 + STEP;
            let up = eval(&work)?;
            work.value_mut(i).data_mut()[j] = x0 - STEP;
            let down = eval(&work)?;
            work.value_mut(i).data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = g.data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            if !(rel <= max_rel) {
                max_rel = rel;
                worst = Some((store.name(i).to_string(), j));
            }
            probes += 1;
        }
    }
    Ok(Check { name: name.to_string(), probes, max_rel, worst, tol })
}

struct Inputs {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Inputs {
    fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn add(&mut self, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let name = format!("input{}", self.store.len());
        let t = Tensor::uniform(shape, lo, hi, &mut self.rng).expect("valid shape");
        self.store.add(name, t)
    }
}

type Prim = (
    &'static str,
    Box<dyn for<'t> Fn(&Bound<'t, f64>, &[ParamId]) -> Result<Var<'t, f64>>>,
    Vec<(Vec<usize>, f64, f64)>,
);

fn sh(s: &[usize]) -> (Vec<usize>, f64, f64) {
    (s.to_vec(), -1.0, 1.0)
}

fn primitive_cases() -> Vec<Prim> {
    vec![
        ("add", Box::new(|p, i| p.get(i[0]).add(p.get(i[1]))), vec![sh(&[3, 4]), sh(&[3, 4])]),
        ("sub", Box::new(|p, i| p.get(i[0]).sub(p.get(i[1]))), vec![sh(&[3, 4]), sh(&[3, 4])]),
        ("mul", Box::new(|p, i| p.get(i[0]).mul(p.get(i[1]))), vec![sh(&[3, 4]), sh(&[3, 4])]),
        ("add_bias", Box::new(|p, i| p.get(i[0]).add_bias(p.get(i[1]))), vec![sh(&[2, 3, 4]), sh(&[4])]),
        ("scale_rows", Box::new(|p, i| p.get(i[0]).scale_rows(p.get(i[1]))), vec![sh(&[2, 3, 4]), sh(&[2, 3])]),
        ("scale/neg/add_scalar", Box::new(|p, i| Ok(p.get(i[0]).scale(1.7).neg().add_scalar(0.3))), vec![sh(&[5])]),
        ("matmul", Box::new(|p, i| p.get(i[0]).matmul(p.get(i[1]))), vec![sh(&[3, 5]), sh(&[5, 2])]),
        ("transpose", Box::new(|p, i| p.get(i[0]).transpose()), vec![sh(&[3, 5])]),
        ("reshape", Box::new(|p, i| p.get(i[0]).reshape(&[6, 2])), vec![sh(&[3, 4])]),
        ("silu", Box::new(|p, i| Ok(p.get(i[0]).silu())), vec![(vec![8], -3.0, 3.0)]),
        ("gelu", Box::new(|p, i| Ok(p.get(i[0]).gelu())), vec![(vec![8], -3.0, 3.0)]),
        ("softplus", Box::new(|p, i| Ok(p.get(i[0]).softplus())), vec![(vec![8], -3.0, 3.0)]),
        ("exp", Box::new(|p, i| Ok(p.get(i[0]).exp())), vec![sh(&[8])]),
        ("abs", Box::new(|p, i| Ok(p.get(i[0]).abs())), vec![(vec![8], 0.1, 1.0)]),
        ("sigmoid", Box::new(|p, i| Ok(p.get(i[0]).sigmoid())), vec![(vec![8], -3.0, 3.0)]),
        ("softmax last", Box::new(|p, i| p.get(i[0]).softmax(&[1])), vec![(vec![3, 4], -2.0, 2.0)]),
        ("softmax [2,3]", Box::new(|p, i| p.get(i[0]).softmax(&[2, 3])), vec![(vec![2, 2, 2, 3], -2.0, 2.0)]),
        ("reverse", Box::new(|p, i| p.get(i[0]).reverse(0)), vec![sh(&[4, 3])]),
        ("concat", Box::new(|p, i| Var::concat(&[p.get(i[0]), p.get(i[1])])), vec![sh(&[2, 3]), sh(&[2, 2])]),
        ("slice_last", Box::new(|p, i| p.get(i[0]).slice_last(1, 2)), vec![sh(&[3, 4])]),
        ("mean", Box::new(|p, i| Ok(p.get(i[0]).mean())), vec![sh(&[3, 4])]),
        (
            "conv1d_causal",
            Box::new(|p, i| p.get(i[0]).conv1d_causal(p.get(i[1]), p.get(i[2]))),
            vec![sh(&[6, 3]), sh(&[3, 4]), sh(&[3])],
        ),
        (
            "conv2d stride 2",
            Box::new(|p, i| p.get(i[0]).conv2d(p.get(i[1]), Some(p.get(i[2])), 2, 1)),
            vec![sh(&[5, 6, 2]), sh(&[3, 3, 2, 3]), sh(&[3])],
        ),
        (
            "conv2d same",
            Box::new(|p, i| p.get(i[0]).conv2d(p.get(i[1]), None, 1, 1)),
            vec![sh(&[4, 3, 2]), sh(&[3, 3, 2, 2])],
        ),
        (
            "selective_scan",
            Box::new(|p, i| {
                let delta = p.get(i[1]).softplus();
                let a = p.get(i[2]).exp().neg();
                p.get(i[0]).selective_scan(delta, a, p.get(i[3]), p.get(i[4]), Some(p.get(i[5])))
            }),
            vec![sh(&[6, 3]), sh(&[6, 3]), sh(&[3, 4]), sh(&[6, 4]), sh(&[6, 4]), sh(&[3])],
        ),
        (
            "layer_norm",
            Box::new(|p, i| p.get(i[0]).layer_norm(p.get(i[1]), p.get(i[2]), 1e-5)),
            vec![(vec![3, 5], -2.0, 2.0), sh(&[5]), sh(&[5])],
        ),
        (
            // fractional flows keep the bilinear weights away from their kinks
            "cost_lookup",
            Box::new(|p, i| p.get(i[0]).cost_lookup(p.get(i[1]), 1)),
            vec![sh(&[3, 4, 3, 4]), (vec![3, 4, 2], -1.45, 1.45)],
        ),
        ("resize_bilinear", Box::new(|p, i| p.get(i[0]).resize_bilinear(7, 5)), vec![sh(&[3, 2, 2])]),
    ]
}

pub fn primitives(seed: u64) -> Result<Vec<Check>> {
    primitive_cases()
        .into_iter()
        .enumerate()
        .map(|(k, (name, f, shapes))| {
            let mut inp = Inputs::new(seed.wrapping_add(k as u64));
            let ids: Vec<ParamId> = shapes.iter().map(|(s, lo, hi)| inp.add(s, *lo, *hi)).collect();
            check(name, &inp.store, 64, PRIMITIVE_TOL, seed, |p| f(p, &ids))
        })
        .collect()
}

fn pulse_config() -> PulseConfig {
    PulseConfig { d_hidden: 6, d_motion: 4, d_state: 3, radius: 1, ..PulseConfig::new(4) }
}

pub fn blocks(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mcfg = MambaConfig::new(4, 3);

    let mut inp = Inputs::new(seed);
    let x = inp.add(&[6, 4], -1.0, 1.0);
    let m = {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        SelfMamba::new(&mut Init { store: &mut inp.store, rng: &mut r }, "self", mcfg)
    };
    out.push(check("self-mamba", &inp.store, 12, PRIMITIVE_TOL, seed, |p| m.forward(p, p.get(x)))?);

    let mut inp = Inputs::new(seed + 1);
    let (f1, f2) = (inp.add(&[6, 4], -1.0, 1.0), inp.add(&[6, 4], -1.0, 1.0));
    let c = {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        CrossMamba::new(&mut Init { store: &mut inp.store, rng: &mut r }, "cross", &mcfg)
    };
    out.push(check("cross-mamba", &inp.store, 12, PRIMITIVE_TOL, seed, |p| c.forward(p, p.get(f1), p.get(f2)))?);

    let pc = pulse_config();
    let mut inp = Inputs::new(seed + 2);
    let (mv, fq, h) = (inp.add(&[3, 3, 4], -1.0, 1.0), inp.add(&[3, 3, 4], -1.0, 1.0), inp.add(&[3, 3, 6], -1.0, 1.0));
    let aga = {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Aga::new(&mut Init { store: &mut inp.store, rng: &mut r }, "aga", &pc)
    };
    out.push(check("aga", &inp.store, 12, PRIMITIVE_TOL, seed, |p| {
        let (x, a) = aga.forward(p, p.get(mv), p.get(fq), p.get(h))?;
        Var::concat(&[x, a])
    })?);

    let mut inp = Inputs::new(seed + 3);
    let (flow, fq, cost) =
        (inp.add(&[3, 3, 2], -0.95, 0.95), inp.add(&[3, 3, 4], -1.0, 1.0), inp.add(&[3, 3, 3, 3], -1.0, 1.0));
    let pm = {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        PulseMamba::new(&mut Init { store: &mut inp.store, rng: &mut r }, "pulse", pc)
    };
    out.push(check("pulse step", &inp.store, 8, PRIMITIVE_TOL, seed, |p| {
        let state = pm.initial_state(p.get(flow))?;
        let s1 = pm.step(p, &state, p.get(fq), p.get(cost))?.state;
        Var::concat(&[s1.flow, s1.hidden])
    })?);

    let mut inp = Inputs::new(seed + 4);
    let (f1, f2) = (inp.add(&[2, 3, 4], -1.0, 1.0), inp.add(&[2, 3, 4], -1.0, 1.0));
    let poly = {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PolyConfig { d_state: 3, depth: 1, ..PolyConfig::new(4, (2, 3)) };
        PolyMamba::new(&mut Init { store: &mut inp.store, rng: &mut r }, "poly", cfg)
    };
    out.push(check("polymamba block", &inp.store, 6, PRIMITIVE_TOL, seed, |p| {
        let (q, v) = poly.forward(p, p.get(f1), p.get(f2))?;
        Var::concat(&[q, v])
    })?);

    let mut inp = Inputs::new(seed + 5);
    let (fq, fv) = (inp.add(&[3, 3, 4], -1.0, 1.0), inp.add(&[3, 3, 4], -1.0, 1.0));
    out.push(check("global match", &inp.store, 36, PRIMITIVE_TOL, seed, |p| {
        global_match(p.get(fq), p.get(fv), DEFAULT_CAPACITY)
            .map(|g| g.flow)
            .map_err(|e| TensorError::InvalidArgument(e.to_string()))
    })?);
    Ok(out)
}

/// The tiny model on a 16×16 pair, through the sequence loss.
pub fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 8,
        stride: 4,
        backbone_width: 4,
        depth: 1,
        d_state: 2,
        d_hidden: 6,
        d_motion: 4,
        radius: 1,
        iterations: 2,
        image_height: 16,
        image_width: 16,
        ..ModelConfig::default()
    }
}

pub fn end_to_end(seed: u64) -> Result<Vec<Check>> {
    let cfg = end_to_end_config();
    let (mut store, model) =
        FlowModel::new::<f64>(cfg, seed).map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img1 = store.add("input.img1", Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng)?);
    let img2 = store.add("input.img2", Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng)?);
    let gt = Tensor::uniform(&[4, 4, 2], -1.0, 1.0, &mut rng)?;
    let check_one = check("end-to-end 16x16", &store, 2, END_TO_END_TOL, seed, |p| {
        let out = model
            .forward(p, p.get(img1), p.get(img2), None)
            .map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
        sequence_loss(&out.flows, p.tape().constant(gt.clone()), 0.8)
    })?;
    Ok(vec![check_one])
}

pub fn run(scope: Scope, seed: u64) -> Result<Vec<Check>> {
    match scope {
        Scope::Primitives => primitives(seed),
        Scope::Blocks => blocks(seed),
        Scope::EndToEnd => end_to_end(seed),
    }
}
