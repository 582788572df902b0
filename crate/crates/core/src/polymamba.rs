//! Feature enhancement: positional embedding plus a stack of blocks, each
//! a stream-shared Self-Mamba, a symmetric pair of Cross-Mambas and an MLP,
//! all pre-normalised residual sub-layers.

use crate::autograd::Var;
use crate::blocks::{CrossMamba, MambaConfig, SelfMamba};
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamId};
use crate::scalar::Scalar;
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub use_self: bool,
    pub use_cross: bool,
    pub use_mlp: bool,
    pub use_pos: bool,
    /// 1→2 and 2→1 Cross-Mamba share parameters.
    pub tied_cross: bool,
    /// Resolution the positional embedding is stored at.
    pub pos_hw: (usize, usize),
}

impl PolyConfig {
    pub fn new(d_model: usize, pos_hw: (usize, usize)) -> Self {
        Self {
            d_model,
            d_state: 16,
            expand: 2,
            conv_width: crate::blocks::DEFAULT_CONV_WIDTH,
            depth: 8,
            mlp_ratio: 4,
            use_self: true,
            use_cross: true,
            use_mlp: true,
            use_pos: true,
            tied_cross: false,
            pos_hw,
        }
    }

    fn mamba(&self) -> MambaConfig {
        MambaConfig { expand: self.expand, conv_width: self.conv_width, ..MambaConfig::new(self.d_model, self.d_state) }
    }
}

/// `[H, W, D] → [H·W, D]`, row-major.
pub fn flatten_2d<'t, T: Scalar>(f: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = f.shape();
    if s.len() != 3 {
        return Err(TensorError::Rank { op: "flatten_2d", expected: 3, shape: s });
    }
    f.reshape(&[s[0] * s[1], s[2]])
}

pub fn unflatten_2d<'t, T: Scalar>(f: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = f.shape();
    if s.len() != 2 || s[0] != h * w {
        return Err(TensorError::ShapeMismatch { op: "unflatten_2d", left: vec![h * w, 0], right: s });
    }
    f.reshape(&[h, w, s[1]])
}

/// Learnable `H×W×D` table added to both feature maps.
#[derive(Debug, Clone)]
pub struct PositionalEmbedding {
    pub table: ParamId,
    pub hw: (usize, usize),
}

impl PositionalEmbedding {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, hw: (usize, usize), d: usize) -> Self {
        Self { table: init.uniform(name, &[hw.0, hw.1, d], 0.02), hw }
    }

    /// The table at resolution `h × w`, bilinearly resampled when it differs
    /// from the stored one.
    pub fn at<'t, T: Scalar>(&self, p: &Bound<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
        let t = p.get(self.table);
        if (h, w) == self.hw {
            Ok(t)
        } else {
            t.resize_bilinear(h, w)
        }
    }

    pub fn add<'t, T: Scalar>(&self, p: &Bound<'t, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = f.shape();
        if s.len() != 3 {
            return Err(TensorError::Rank { op: "add_positional", expected: 3, shape: s });
        }
        f.add(self.at(p, s[0], s[1])?)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct PolyBlock {
    self_part: Option<(LayerNorm, SelfMamba)>,
    cross_part: Option<(LayerNorm, CrossMamba, Option<CrossMamba>)>,
    mlp: Option<Mlp>,
}

impl PolyBlock {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &PolyConfig) -> Self {
        let d = cfg.d_model;
        let self_part = cfg.use_self.then(|| {
            (
                LayerNorm::new(init, &format!("{name}.self_norm"), d),
                SelfMamba::new(init, &format!("{name}.self"), cfg.mamba()),
            )
        });
        let cross_part = cfg.use_cross.then(|| {
            let norm = LayerNorm::new(init, &format!("{name}.cross_norm"), d);
            let m = cfg.mamba();
            let c12 = CrossMamba::new(init, &format!("{name}.cross12"), &m);
            let c21 = (!cfg.tied_cross).then(|| CrossMamba::new(init, &format!("{name}.cross21"), &m));
            (norm, c12, c21)
        });
        let mlp = cfg.use_mlp.then(|| Mlp {
            norm: LayerNorm::new(init, &format!("{name}.mlp_norm"), d),
            fc1: Linear::new(init, &format!("{name}.mlp.fc1"), d, cfg.mlp_ratio * d, true),
            fc2: Linear::new(init, &format!("{name}.mlp.fc2"), cfg.mlp_ratio * d, d, true),
        });
        Self { self_part, cross_part, mlp }
    }

    fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        mut f1: Var<'t, T>,
        mut f2: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if let Some((norm, sm)) = &self.self_part {
            f1 = f1.add(sm.forward(p, norm.forward(p, f1)?)?)?;
            f2 = f2.add(sm.forward(p, norm.forward(p, f2)?)?)?;
        }
        if let Some((norm, c12, c21)) = &self.cross_part {
            let (n1, n2) = (norm.forward(p, f1)?, norm.forward(p, f2)?);
            let d1 = c12.forward(p, n1, n2)?;
            let d2 = c21.as_ref().unwrap_or(c12).forward(p, n2, n1)?;
            f1 = f1.add(d1)?;
            f2 = f2.add(d2)?;
        }
        if let Some(m) = &self.mlp {
            let mlp = |x: Var<'t, T>| -> Result<Var<'t, T>> {
                let h = m.fc1.forward(p, m.norm.forward(p, x)?)?.gelu();
                x.add(m.fc2.forward(p, h)?)
            };
            f1 = mlp(f1)?;
            f2 = mlp(f2)?;
        }
        Ok((f1, f2))
    }
}

#[derive(Debug, Clone)]
pub struct PolyMamba {
    pub config: PolyConfig,
    pos: Option<PositionalEmbedding>,
    blocks: Vec<PolyBlock>,
    /// Final norm of the residual stream, shared by both streams.
    out_norm: Option<LayerNorm>,
}

impl PolyMamba {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, config: PolyConfig) -> Self {
        let pos = config
            .use_pos
            .then(|| PositionalEmbedding::new(init, &format!("{name}.pos"), config.pos_hw, config.d_model));
        let blocks = (0..config.depth).map(|i| PolyBlock::new(init, &format!("{name}.block{i}"), &config)).collect();
        let out_norm = (config.depth > 0).then(|| LayerNorm::new(init, &format!("{name}.out_norm"), config.d_model));
        Self { config, pos, blocks, out_norm }
    }

    pub fn positional(&self) -> Option<&PositionalEmbedding> {
        self.pos.as_ref()
    }

    /// Enhances two `[H, W, D]` maps; returns `(F_q, F_v)` of the same shape.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        f1: Var<'t, T>,
        f2: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = f1.shape();
        if s.len() != 3 || s[2] != self.config.d_model || f2.shape() != s {
            return Err(TensorError::ShapeMismatch { op: "polymamba", left: s, right: f2.shape() });
        }
        let (h, w) = (s[0], s[1]);
        let (mut a, mut b) = match &self.pos {
            Some(pe) => (pe.add(p, f1)?, pe.add(p, f2)?),
            None => (f1, f2),
        };
        a = flatten_2d(a)?;
        b = flatten_2d(b)?;
        for blk in &self.blocks {
            (a, b) = blk.forward(p, a, b)?;
        }
        if let Some(n) = &self.out_norm {
            a = n.forward(p, a)?;
            b = n.forward(p, b)?;
        }
        Ok((unflatten_2d(a, h, w)?, unflatten_2d(b, h, w)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: PolyConfig) -> (ParamStore<f64>, PolyMamba) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = PolyMamba::new(&mut Init { store: &mut store, rng: &mut rng }, "poly", cfg);
        (store, m)
    }

    fn small() -> PolyConfig {
        PolyConfig { d_state: 4, depth: 2, ..PolyConfig::new(8, (3, 4)) }
    }

    fn map(seed: u64) -> Tensor<f64> {
        Tensor::randn(&[3, 4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn flatten_row_major_roundtrip() {
        let tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::from_f64(&[2, 2, 1], &[1., 2., 3., 4.]).unwrap());
        let flat = flatten_2d(f).unwrap();
        assert_eq!(flat.value().data(), &[1., 2., 3., 4.]);
        assert_eq!(flat.shape(), vec![4, 1]);
        let r = map(1);
        let back = unflatten_2d(flatten_2d(tape.constant(r.clone())).unwrap(), 3, 4).unwrap();
        assert_eq!(*back.value(), r);
    }

    #[test]
    fn empty_stack_is_identity() {
        let (store, m) = build(PolyConfig { depth: 0, use_pos: false, ..small() });
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let (q, v) = m.forward(&p, tape.constant(map(1)), tape.constant(map(2))).unwrap();
        assert_eq!(*q.value(), map(1));
        assert_eq!(*v.value(), map(2));
    }

    #[test]
    fn tied_cross_is_swap_symmetric() {
        let (store, m) = build(PolyConfig { tied_cross: true, ..small() });
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let (a, b) = (tape.constant(map(3)), tape.constant(map(4)));
        let (q, v) = m.forward(&p, a, b).unwrap();
        let (q2, v2) = m.forward(&p, b, a).unwrap();
        assert!(q.value().max_abs_diff(&v2.value()) < 1e-12);
        assert!(v.value().max_abs_diff(&q2.value()) < 1e-12);
    }

    #[test]
    fn parameter_counts_are_ordered() {
        let count = |cfg| build(cfg).0.num_elements();
        let full = count(small());
        let no_mlp = count(PolyConfig { use_mlp: false, ..small() });
        let no_cross = count(PolyConfig { use_cross: false, ..small() });
        assert!(full > no_mlp && no_mlp > no_cross, "{full} {no_mlp} {no_cross}");
        let mut last = 0;
        for depth in 0..4 {
            let c = count(PolyConfig { depth, ..small() });
            assert!(c > last || depth == 0);
            last = c;
        }
    }

    #[test]
    fn positional_receives_gradient_and_resamples() {
        let (store, m) = build(small());
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (q, v) = m.forward(&p, tape.constant(map(5)), tape.constant(map(6))).unwrap();
        let loss = q.mul(q).unwrap().sum().add(v.sum()).unwrap();
        let g = tape.backward(loss).unwrap();
        let table = m.positional().unwrap().table;
        assert!(g.get_or_zeros(p.get(table)).max_abs() > 0.0);

        let big = tape.constant(Tensor::zeros(&[6, 8, 8]).unwrap());
        let out = m.positional().unwrap().add(&p, big).unwrap();
        assert_eq!(out.shape(), vec![6, 8, 8]);
    }

    #[test]
    fn zero_table_leaves_features_unchanged() {
        let (mut store, m) = build(small());
        let id = m.positional().unwrap().table;
        *store.param_mut(id) = Tensor::zeros(&[3, 4, 8]).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let f = tape.constant(map(7));
        assert_eq!(*m.positional().unwrap().add(&p, f).unwrap().value(), map(7));
    }
}
