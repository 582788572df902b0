//! Named parameters and the small layer vocabulary the model is built from.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.iter().map(|(n, v)| (n, v.shape()))).finish()
    }
}

/// Equal when names, order, shapes and values all match bit for bit.
impl<T: Scalar> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a == b)
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name '{name}'");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &*self.values[i])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.values[i])
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.value_mut(id.0)
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.values.iter().map(|v| &**v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values())
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| crate::tensor::TensorError::InvalidArgument(format!("unknown parameter '{name}'")))?;
        self.values[i].expect_same_shape(&value, "set parameter")?;
        self.values[i] = Rc::new(value);
        Ok(())
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { tape, vars: self.values.iter().map(|v| tape.leaf_shared(v.clone(), true)).collect() }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { tape, vars: self.values.iter().map(|v| tape.leaf_shared(v.clone(), false)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, v) in self.iter() {
            out.add(n, v.cast());
        }
        out
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t, T> {
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// One gradient per parameter, zeros where a parameter was unused.
    pub fn grads(&self, g: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| g.get_or_zeros(v)).collect()
    }
}

/// Parameter construction context: target store plus a seeded generator.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = Tensor::uniform(shape, -bound, bound, self.rng).expect("parameter shapes are non-empty");
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let t = Tensor::full(shape, T::from_f64_lossy(value)).expect("parameter shapes are non-empty");
        self.store.add(name, t)
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.store.add(name, value)
    }

    pub fn gen_range(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }
}

/// `y = x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = init.uniform(&format!("{name}.weight"), &[in_dim, out_dim], bound);
        let bias = bias.then(|| init.uniform(&format!("{name}.bias"), &[out_dim], bound));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let lead: usize = shape[..shape.len().saturating_sub(1)].iter().product();
        let flat = if shape.len() == 2 { x } else { x.reshape(&[lead.max(1), self.in_dim])? };
        let mut y = flat.matmul(p.get(self.weight))?;
        if let Some(b) = self.bias {
            y = y.add_bias(p.get(b))?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape.clone();
            *out.last_mut().unwrap() = self.out_dim;
            y.reshape(&out)
        }
    }
}

/// 2-D convolution over `[H, W, C]` feature maps.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / ((ksize * ksize * cin) as f64).sqrt();
        let kernel = init.uniform(&format!("{name}.kernel"), &[ksize, ksize, cin, cout], bound);
        let bias = bias.then(|| init.uniform(&format!("{name}.bias"), &[cout], bound));
        Self { kernel, bias, stride, pad }
    }

    /// He-uniform kernel for GELU/ReLU stacks, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn he<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = (6.0 / (ksize * ksize * cin) as f64).sqrt();
        let kernel = init.uniform(&format!("{name}.kernel"), &[ksize, ksize, cin, cout], bound);
        let bias = Some(init.constant(&format!("{name}.bias"), &[cout], 0.0));
        Self { kernel, bias, stride, pad }
    }

    /// Same-size `k×k` convolution (stride 1, padding `k/2`).
    pub fn same<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, ksize: usize) -> Self {
        Self::new(init, name, cin, cout, ksize, 1, ksize / 2, true)
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(p.get(self.kernel), self.bias.map(|b| p.get(b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0),
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), T::from_f64_lossy(Self::EPS))
    }
}

/// Depthwise causal convolution along the sequence axis.
#[derive(Debug, Clone)]
pub struct CausalConv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl CausalConv1d {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, width: usize) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        Self {
            kernel: init.uniform(&format!("{name}.kernel"), &[dim, width], bound),
            bias: init.uniform(&format!("{name}.bias"), &[dim], bound),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv1d_causal(p.get(self.kernel), p.get(self.bias))
    }
}
