//! Iterative flow refinement.
//!
//! Each step looks up local cost around the current flow, encodes motion,
//! aggregates motion / context / hidden features (attention-weighted or
//! plain concatenation), runs a residual Mamba layer over the flattened map
//! to get the new hidden state, and predicts a flow increment. The same
//! parameters are used at every iteration.

use crate::autograd::Var;
use crate::blocks::{MambaConfig, SelfMamba};
use crate::nn::{Bound, Conv2d, Init, LayerNorm};
use crate::polymamba::{flatten_2d, unflatten_2d};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_RADIUS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseConfig {
    /// Channel width of the context features `F_q`.
    pub d_feat: usize,
    /// Hidden width `Dh`.
    pub d_hidden: usize,
    /// Motion feature width `Dm`.
    pub d_motion: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub radius: usize,
    pub iterations: usize,
    pub use_aga: bool,
    /// Mamba layers per step.
    pub mamba_depth: usize,
    pub bidirectional: bool,
}

impl PulseConfig {
    pub fn new(d_feat: usize) -> Self {
        Self {
            d_feat,
            d_hidden: 128,
            d_motion: 64,
            d_state: 16,
            expand: 2,
            conv_width: crate::blocks::DEFAULT_CONV_WIDTH,
            radius: DEFAULT_RADIUS,
            iterations: 2,
            use_aga: true,
            mamba_depth: 1,
            bidirectional: true,
        }
    }

    pub fn window(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }
}

/// Local cost features `[H, W, (2r+1)²]` sampled around `G + V`.
pub fn lookup_cost<'t, T: Scalar>(cost: Var<'t, T>, flow: Var<'t, T>, radius: usize) -> Result<Var<'t, T>> {
    cost.cost_lookup(flow, radius)
}

#[derive(Debug, Clone)]
pub struct MotionEncoder {
    flow_conv: Conv2d,
    cost_conv: Conv2d,
    fuse: Conv2d,
}

impl MotionEncoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, window: usize, d_motion: usize) -> Self {
        let half = (d_motion / 2).max(1);
        Self {
            flow_conv: Conv2d::same(init, &format!("{name}.flow"), 2, half, 3),
            cost_conv: Conv2d::same(init, &format!("{name}.cost"), window, half, 1),
            fuse: Conv2d::same(init, &format!("{name}.fuse"), 2 * half, d_motion, 3),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        flow: Var<'t, T>,
        costfeat: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let f = self.flow_conv.forward(p, flow)?.gelu();
        let c = self.cost_conv.forward(p, costfeat)?.gelu();
        Ok(self.fuse.forward(p, Var::concat(&[f, c])?)?.gelu())
    }
}

/// 1×1 projections of motion, context and hidden features to `Dh`.
#[derive(Debug, Clone)]
struct Align {
    motion: Conv2d,
    context: Conv2d,
    hidden: Conv2d,
}

impl Align {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &PulseConfig) -> Self {
        let dh = cfg.d_hidden;
        Self {
            motion: Conv2d::same(init, &format!("{name}.motion"), cfg.d_motion, dh, 1),
            context: Conv2d::same(init, &format!("{name}.context"), cfg.d_feat, dh, 1),
            hidden: Conv2d::same(init, &format!("{name}.hidden"), dh, dh, 1),
        }
    }

    fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        m: Var<'t, T>,
        fq: Var<'t, T>,
        h: Var<'t, T>,
    ) -> Result<[Var<'t, T>; 3]> {
        Ok([self.motion.forward(p, m)?, self.context.forward(p, fq)?, self.hidden.forward(p, h)?])
    }
}

/// Attention-guided aggregation: per-pixel softmax weights over the three
/// aligned feature types.
#[derive(Debug, Clone)]
pub struct Aga {
    align: Align,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl Aga {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &PulseConfig) -> Self {
        let dh = cfg.d_hidden;
        Self {
            align: Align::new(init, &format!("{name}.align"), cfg),
            conv1: Conv2d::same(init, &format!("{name}.conv1"), 3 * dh, dh, 3),
            conv2: Conv2d::same(init, &format!("{name}.conv2"), dh, 3, 1),
        }
    }

    /// Attention maps `[H, W, 3]` for already aligned features.
    pub fn attention<'t, T: Scalar>(&self, p: &Bound<'t, T>, aligned: &[Var<'t, T>; 3]) -> Result<Var<'t, T>> {
        let logits = self.conv2.forward(p, self.conv1.forward(p, Var::concat(aligned)?)?.gelu())?;
        logits.softmax(&[2])
    }

    /// Returns `(x_AGA, A)`.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        m: Var<'t, T>,
        fq: Var<'t, T>,
        h: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let aligned = self.align.forward(p, m, fq, h)?;
        let a = self.attention(p, &aligned)?;
        Ok((weighted_sum(&aligned, a)?, a))
    }
}

/// `Σ_f A[..., f] ⊙ f̃`.
pub fn weighted_sum<'t, T: Scalar>(aligned: &[Var<'t, T>], a: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = a.shape();
    let lead = &s[..s.len() - 1];
    let mut out: Option<Var<'t, T>> = None;
    for (f, x) in aligned.iter().enumerate() {
        let w = a.slice_last(f, 1)?.reshape(lead)?;
        let term = x.scale_rows(w)?;
        out = Some(match out {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    out.ok_or_else(|| TensorError::InvalidArgument("weighted_sum over no features".into()))
}

/// Ablation baseline: aligned features concatenated and fused by a 1×1 conv.
#[derive(Debug, Clone)]
pub struct ConcatFuse {
    align: Align,
    fuse: Conv2d,
}

impl ConcatFuse {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &PulseConfig) -> Self {
        Self {
            align: Align::new(init, &format!("{name}.align"), cfg),
            fuse: Conv2d::same(init, &format!("{name}.fuse"), 3 * cfg.d_hidden, cfg.d_hidden, 1),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        m: Var<'t, T>,
        fq: Var<'t, T>,
        h: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let aligned = self.align.forward(p, m, fq, h)?;
        self.fuse.forward(p, Var::concat(&aligned)?)
    }
}

#[derive(Debug, Clone)]
enum Aggregator {
    Aga(Aga),
    Concat(ConcatFuse),
}

#[derive(Debug, Clone)]
pub struct FlowHead {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl FlowHead {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d_hidden: usize) -> Self {
        let mid = (d_hidden / 2).max(1);
        Self {
            conv1: Conv2d::same(init, &format!("{name}.conv1"), d_hidden, mid, 3),
            conv2: Conv2d::same(init, &format!("{name}.conv2"), mid, 2, 3),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
        self.conv2.forward(p, self.conv1.forward(p, h)?.gelu())
    }

    /// Parameters of the head, for zeroing in tests.
    pub fn params(&self) -> Vec<crate::nn::ParamId> {
        let mut v = vec![self.conv1.kernel, self.conv2.kernel];
        v.extend(self.conv1.bias);
        v.extend(self.conv2.bias);
        v
    }
}

#[derive(Clone)]
pub struct RefinementState<'t, T> {
    pub hidden: Var<'t, T>,
    pub flow: Var<'t, T>,
    pub iteration: usize,
}

pub struct StepOutput<'t, T> {
    pub state: RefinementState<'t, T>,
    /// Attention maps when the aggregator is AGA.
    pub attention: Option<Var<'t, T>>,
}

pub struct Refinement<'t, T> {
    /// `N + 1` flows, starting with the initial one.
    pub flows: Vec<Var<'t, T>>,
    pub attention: Vec<Var<'t, T>>,
    pub state: RefinementState<'t, T>,
}

#[derive(Debug, Clone)]
pub struct PulseMamba {
    pub config: PulseConfig,
    pub encoder: MotionEncoder,
    aggregator: Aggregator,
    layers: Vec<(LayerNorm, SelfMamba)>,
    pub head: FlowHead,
}

impl PulseMamba {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, config: PulseConfig) -> Self {
        let dh = config.d_hidden;
        let encoder = MotionEncoder::new(init, &format!("{name}.motion"), config.window(), config.d_motion);
        let aggregator = if config.use_aga {
            Aggregator::Aga(Aga::new(init, &format!("{name}.aga"), &config))
        } else {
            Aggregator::Concat(ConcatFuse::new(init, &format!("{name}.concat"), &config))
        };
        let mcfg = MambaConfig {
            expand: config.expand,
            conv_width: config.conv_width,
            ..MambaConfig::new(dh, config.d_state)
        };
        let layers = (0..config.mamba_depth)
            .map(|i| {
                (
                    LayerNorm::new(init, &format!("{name}.mamba{i}.norm"), dh),
                    SelfMamba::new(init, &format!("{name}.mamba{i}"), mcfg),
                )
            })
            .collect();
        let head = FlowHead::new(init, &format!("{name}.head"), dh);
        Self { config, encoder, aggregator, layers, head }
    }

    pub fn initial_state<'t, T: Scalar>(&self, flow: Var<'t, T>) -> Result<RefinementState<'t, T>> {
        let s = flow.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(TensorError::Rank { op: "refinement flow", expected: 3, shape: s });
        }
        let hidden = flow.tape().constant(Tensor::zeros(&[s[0], s[1], self.config.d_hidden])?);
        Ok(RefinementState { hidden, flow, iteration: 0 })
    }

    fn mamba<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let mut seq = flatten_2d(x)?;
        for (norm, m) in &self.layers {
            let n = norm.forward(p, seq)?;
            let d = if self.config.bidirectional { m.forward(p, n)? } else { m.forward_causal(p, n)? };
            seq = seq.add(d)?;
        }
        unflatten_2d(seq, s[0], s[1])
    }

    pub fn step<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        state: &RefinementState<'t, T>,
        fq: Var<'t, T>,
        cost: Var<'t, T>,
    ) -> Result<StepOutput<'t, T>> {
        let costfeat = lookup_cost(cost, state.flow, self.config.radius)?;
        let m = self.encoder.forward(p, state.flow, costfeat)?;
        let (x, attention) = match &self.aggregator {
            Aggregator::Aga(aga) => {
                let (x, a) = aga.forward(p, m, fq, state.hidden)?;
                (x, Some(a))
            }
            Aggregator::Concat(c) => (c.forward(p, m, fq, state.hidden)?, None),
        };
        let hidden = self.mamba(p, x)?;
        let flow = state.flow.add(self.head.forward(p, hidden)?)?;
        Ok(StepOutput { state: RefinementState { hidden, flow, iteration: state.iteration + 1 }, attention })
    }

    pub fn refine<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        flow0: Var<'t, T>,
        fq: Var<'t, T>,
        cost: Var<'t, T>,
        iterations: usize,
    ) -> Result<Refinement<'t, T>> {
        let mut state = self.initial_state(flow0)?;
        let mut flows = vec![flow0];
        let mut attention = Vec::new();
        for _ in 0..iterations {
            let out = self.step(p, &state, fq, cost)?;
            state = out.state;
            flows.push(state.flow);
            attention.extend(out.attention);
        }
        Ok(Refinement { flows, attention, state })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> PulseConfig {
        PulseConfig { d_hidden: 8, d_motion: 6, d_state: 3, radius: 1, ..PulseConfig::new(5) }
    }

    fn build<B>(f: impl FnOnce(&mut Init<'_, f64>) -> B) -> (ParamStore<f64>, B) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let b = f(&mut Init { store: &mut store, rng: &mut rng });
        (store, b)
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn lookup_identity_and_lattice() {
        let tape = Tape::<f64>::new();
        let cost = rand(&[3, 4, 3, 4], 1);
        let c = tape.constant(cost.clone());
        let zero = tape.constant(Tensor::zeros(&[3, 4, 2]).unwrap());
        let out = lookup_cost(c, zero, 0).unwrap().value();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(out.get(&[i, j, 0]), cost.get(&[i, j, i, j]));
            }
        }
        // integer flow (+1, 0) → right neighbour, exactly
        let right = tape.constant(Tensor::from_fn(&[3, 4, 2], |k| if k % 2 == 0 { 1.0 } else { 0.0 }).unwrap());
        let out = lookup_cost(c, right, 0).unwrap().value();
        assert_eq!(out.get(&[1, 2, 0]), cost.get(&[1, 2, 1, 3]));
        assert_eq!(out.get(&[1, 3, 0]), 0.0);
    }

    #[test]
    fn motion_encoder_zero_in_zero_out() {
        let (mut store, enc) = build(|i| MotionEncoder::new(i, "m", 9, 6));
        for i in 0..store.len() {
            if store.name(i).ends_with("bias") {
                let z = Tensor::zeros(store.value(i).shape()).unwrap();
                *store.value_mut(i) = z;
            }
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let out = enc
            .forward(
                &p,
                tape.constant(Tensor::zeros(&[4, 5, 2]).unwrap()),
                tape.constant(Tensor::zeros(&[4, 5, 9]).unwrap()),
            )
            .unwrap();
        assert_eq!(out.shape(), vec![4, 5, 6]);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aga_convexity_and_saturation() {
        let c = cfg();
        let (mut store, aga) = build(|i| Aga::new(i, "a", &c));
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let f = tape.constant(rand(&[3, 4, 8], 2));
        let a = aga.attention(&p, &[f, f, f]).unwrap();
        let x = weighted_sum(&[f, f, f], a).unwrap();
        assert!(x.value().max_abs_diff(&f.value()) < 1e-12);
        for px in a.value().data().chunks(3) {
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        // big bias on the motion slot, zero kernel → A one-hot on M
        let k2 = aga.conv2.kernel;
        let b2 = aga.conv2.bias.unwrap();
        *store.param_mut(k2) = Tensor::zeros(store.param(k2).shape()).unwrap();
        *store.param_mut(b2) = Tensor::from_f64(&[3], &[60.0, 0.0, 0.0]).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let (m, fq, h) = (
            tape.constant(rand(&[3, 4, 6], 3)),
            tape.constant(rand(&[3, 4, 5], 4)),
            tape.constant(rand(&[3, 4, 8], 5)),
        );
        let (x, _) = aga.forward(&p, m, fq, h).unwrap();
        let aligned_m = aga.align.motion.forward(&p, m).unwrap();
        assert!(x.value().max_abs_diff(&aligned_m.value()) < 1e-6);
    }

    #[test]
    fn concat_zero_and_param_audit() {
        let c = cfg();
        let (mut store, cf) = build(|i| ConcatFuse::new(i, "c", &c));
        for i in 0..store.len() {
            if store.name(i).ends_with("bias") {
                let z = Tensor::zeros(store.value(i).shape()).unwrap();
                *store.value_mut(i) = z;
            }
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let z = |d| tape.constant(Tensor::zeros(&[2, 3, d]).unwrap());
        let out = cf.forward(&p, z(6), z(5), z(8)).unwrap();
        assert_eq!(out.shape(), vec![2, 3, 8]);
        assert!(out.value().data().iter().all(|&v| v == 0.0));

        let (with_aga, _) = build(|i| PulseMamba::new(i, "p", c));
        let (with_cat, _) = build(|i| PulseMamba::new(i, "p", PulseConfig { use_aga: false, ..c }));
        let dh = c.d_hidden;
        let attention = (9 * 3 * dh * dh + dh) + (dh * 3 + 3);
        let fuse = 3 * dh * dh + dh;
        assert_eq!(with_aga.num_elements() - with_cat.num_elements(), attention - fuse);
    }

    fn toy(store: &ParamStore<f64>, pm: &PulseMamba, n: usize) -> Vec<Tensor<f64>> {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let cost = tape.constant(rand(&[3, 4, 3, 4], 6));
        let fq = tape.constant(rand(&[3, 4, 5], 7));
        let v0 = tape.constant(rand(&[3, 4, 2], 8).map(|v| 0.3 * v));
        let r = pm.refine(&p, v0, fq, cost, n).unwrap();
        assert_eq!(r.flows.len(), n + 1);
        for a in &r.attention {
            for px in a.value().data().chunks(3) {
                assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        r.flows.iter().map(|f| (*f.value()).clone()).collect()
    }

    #[test]
    fn refine_contracts() {
        let (mut store, pm) = build(|i| PulseMamba::new(i, "p", cfg()));
        let flows = toy(&store, &pm, 2);
        assert_ne!(flows[0], flows[2]);
        assert_eq!(toy(&store, &pm, 2), flows, "deterministic");
        assert_eq!(toy(&store, &pm, 0), vec![flows[0].clone()]);

        for id in pm.head.params() {
            *store.param_mut(id) = Tensor::zeros(store.param(id).shape()).unwrap();
        }
        let fixed = toy(&store, &pm, 3);
        assert!(fixed.iter().all(|f| *f == fixed[0]));
    }
}
