//! Shared-weight convolutional feature encoder.
//!
//! A stride-2 stem, six residual blocks whose strides bring the total
//! downsampling to 4 or 8, and a 1×1 projection to the feature width.

use crate::autograd::Var;
use crate::nn::{Bound, Conv2d, Init};
use crate::scalar::Scalar;
use crate::tensor::Result;

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv1: Conv2d::he(init, &format!("{name}.conv1"), cin, cout, 3, stride, 1),
            conv2: Conv2d::he(init, &format!("{name}.conv2"), cout, cout, 3, 1, 1),
            shortcut: (stride != 1 || cin != cout)
                .then(|| Conv2d::he(init, &format!("{name}.short"), cin, cout, 1, stride, 0)),
        }
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv2.forward(p, self.conv1.forward(p, x)?.gelu())?;
        let s = match &self.shortcut {
            Some(c) => c.forward(p, x)?,
            None => x,
        };
        Ok(y.add(s)?.gelu())
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub stride: usize,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    head: Conv2d,
}

impl Backbone {
    /// `stride` must be 4 or 8.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, width: usize, out_dim: usize, stride: usize) -> Self {
        let strides: [usize; 6] = if stride == 8 { [1, 1, 2, 1, 2, 1] } else { [1, 1, 2, 1, 1, 1] };
        let widths = [width, width, width * 3 / 2, width * 3 / 2, 2 * width, 2 * width];
        let stem = Conv2d::he(init, &format!("{name}.stem"), 3, width, 3, 2, 1);
        let mut cin = width;
        let blocks = strides
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (&s, cout))| {
                let b = ResBlock::new(init, &format!("{name}.block{i}"), cin, cout, s);
                cin = cout;
                b
            })
            .collect();
        let head = Conv2d::same(init, &format!("{name}.head"), cin, out_dim, 1);
        Self { stride, stem, blocks, head }
    }

    /// `[H, W, 3]` image in `[0, 1]` → `[H/s, W/s, D]`.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, img: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = img.scale(T::from_f64_lossy(2.0)).add_scalar(-T::one());
        let mut x = self.stem.forward(p, x)?.gelu();
        for b in &self.blocks {
            x = b.forward(p, x)?;
        }
        self.head.forward(p, x)
    }
}
