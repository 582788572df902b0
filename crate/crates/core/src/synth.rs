//! Procedural image pairs with exact ground-truth flow.
//!
//! The texture is an analytic, smooth function of continuous image
//! coordinates (Gaussian blobs plus bicubic-smoothed value noise), so the
//! second frame can be rendered exactly at any warped position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Texture-space margin around the frame, in pixels.
const MARGIN: f64 = 16.0;
const NOISE_CELL: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct Texture {
    blobs: Vec<([f64; 2], f64, [f64; 3])>,
    noise: Vec<[f64; 3]>,
    noise_w: usize,
    noise_h: usize,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl Texture {
    pub fn random<R: Rng>(height: usize, width: usize, rng: &mut R) -> Self {
        let (w, h) = (width as f64 + 2.0 * MARGIN, height as f64 + 2.0 * MARGIN);
        let count = ((w * h) / 40.0).ceil() as usize;
        let blobs = (0..count)
            .map(|_| {
                let c = [rng.gen_range(-MARGIN..width as f64 + MARGIN), rng.gen_range(-MARGIN..height as f64 + MARGIN)];
                let sigma = rng.gen_range(1.0..3.5);
                let col = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                (c, sigma, col)
            })
            .collect();
        let noise_w = (w / NOISE_CELL).ceil() as usize + 2;
        let noise_h = (h / NOISE_CELL).ceil() as usize + 2;
        let noise = (0..noise_w * noise_h).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        Self { blobs, noise, noise_w, noise_h }
    }

    fn noise_at(&self, x: f64, y: f64) -> [f64; 3] {
        let gx = ((x + MARGIN) / NOISE_CELL).clamp(0.0, (self.noise_w - 2) as f64);
        let gy = ((y + MARGIN) / NOISE_CELL).clamp(0.0, (self.noise_h - 2) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (tx, ty) = (smoothstep(gx - x0 as f64), smoothstep(gy - y0 as f64));
        let at = |i: usize, j: usize| self.noise[j * self.noise_w + i];
        std::array::from_fn(|k| {
            let top = at(x0, y0)[k] * (1.0 - tx) + at(x0 + 1, y0)[k] * tx;
            let bot = at(x0, y0 + 1)[k] * (1.0 - tx) + at(x0 + 1, y0 + 1)[k] * tx;
            top * (1.0 - ty) + bot * ty
        })
    }

    /// RGB in `(0, 1)` at continuous coordinates `(x, y)`.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut acc = self.noise_at(x, y).map(|v| 0.6 * v);
        for &(c, sigma, col) in &self.blobs {
            let d2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
            let r2 = 2.0 * sigma * sigma;
            if d2 < 9.0 * r2 {
                let g = (-d2 / r2).exp();
                for k in 0..3 {
                    acc[k] += col[k] * g;
                }
            }
        }
        acc.map(|v| 0.5 + 0.5 * v.tanh())
    }

    pub fn render(&self, height: usize, width: usize, warp: impl Fn(f64, f64) -> (f64, f64)) -> Tensor<f32> {
        let mut data = Vec::with_capacity(height * width * 3);
        for i in 0..height {
            for j in 0..width {
                let (x, y) = warp(j as f64, i as f64);
                data.extend(self.sample(x, y).map(|v| v as f32));
            }
        }
        Tensor::new(&[height, width, 3], data).expect("shape matches")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Translation {
        dx: f64,
        dy: f64,
    },
    /// Rotation by `angle` radians about the frame centre.
    Rotation {
        angle: f64,
    },
}

impl Motion {
    fn centre(h: usize, w: usize) -> (f64, f64) {
        ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
    }

    /// Where pixel `(x, y)` of frame 1 lands in frame 2.
    pub fn forward(&self, h: usize, w: usize, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Motion::Translation { dx, dy } => (x + dx, y + dy),
            Motion::Rotation { angle } => {
                let (cx, cy) = Self::centre(h, w);
                let (s, c) = angle.sin_cos();
                let (rx, ry) = (x - cx, y - cy);
                (cx + c * rx - s * ry, cy + s * rx + c * ry)
            }
        }
    }

    /// Inverse of [`Motion::forward`]: the frame-1 position seen at `(x, y)` in frame 2.
    pub fn backward(&self, h: usize, w: usize, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Motion::Translation { dx, dy } => (x - dx, y - dy),
            Motion::Rotation { angle } => Motion::Rotation { angle: -angle }.forward(h, w, x, y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowSample {
    /// `[H, W, 3]` in `[0, 1]`.
    pub img1: Tensor<f32>,
    pub img2: Tensor<f32>,
    /// `[H, W, 2]` frame-1 displacement `(dx, dy)`.
    pub flow: Tensor<f32>,
    pub valid: Vec<bool>,
    /// Pixels whose target falls outside frame 2.
    pub occluded: Vec<bool>,
    pub motion: Motion,
    pub texture: Texture,
}

impl FlowSample {
    pub fn render(texture: Texture, h: usize, w: usize, motion: Motion) -> Self {
        let img1 = texture.render(h, w, |x, y| (x, y));
        let img2 = texture.render(h, w, |x, y| motion.backward(h, w, x, y));
        let mut flow = Vec::with_capacity(h * w * 2);
        let mut occluded = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (x, y) = (j as f64, i as f64);
                let (tx, ty) = motion.forward(h, w, x, y);
                flow.push((tx - x) as f32);
                flow.push((ty - y) as f32);
                let inside = (0.0..=(w - 1) as f64).contains(&tx) && (0.0..=(h - 1) as f64).contains(&ty);
                occluded.push(!inside);
            }
        }
        Self {
            img1,
            img2,
            flow: Tensor::new(&[h, w, 2], flow).expect("shape matches"),
            valid: vec![true; h * w],
            occluded,
            motion,
            texture,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.img1.shape()[0], self.img1.shape()[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Largest displacement magnitude in pixels.
    pub max_disp: f64,
    /// Share of samples that are rotations; the rest are translations.
    pub rotation_share: f64,
    /// Share of translations with integer components.
    pub integer_share: f64,
}

impl SynthConfig {
    pub fn new(height: usize, width: usize, max_disp: f64) -> Self {
        Self { height, width, max_disp, rotation_share: 0.2, integer_share: 0.3 }
    }

    fn motion<R: Rng>(&self, rng: &mut R) -> Motion {
        if rng.gen_bool(self.rotation_share.clamp(0.0, 1.0)) {
            // corner radius bounds the largest displacement: 2 r sin(θ/2) ≤ max_disp
            let (cx, cy) = Motion::centre(self.height, self.width);
            let r = cx.hypot(cy).max(1.0);
            let limit = 2.0 * (self.max_disp / (2.0 * r)).min(1.0).asin();
            return Motion::Rotation { angle: rng.gen_range(-limit..=limit) };
        }
        loop {
            let (mut dx, mut dy): (f64, f64) =
                (rng.gen_range(-self.max_disp..=self.max_disp), rng.gen_range(-self.max_disp..=self.max_disp));
            if rng.gen_bool(self.integer_share.clamp(0.0, 1.0)) {
                dx = dx.round();
                dy = dy.round();
            }
            if dx.hypot(dy) <= self.max_disp {
                return Motion::Translation { dx, dy };
            }
        }
    }
}

/// Sample `index` of the stream for `seed`; independent of how many other
/// samples are generated.
pub fn sample(seed: u64, index: u64, cfg: &SynthConfig) -> FlowSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let texture = Texture::random(cfg.height, cfg.width, &mut rng);
    let motion = cfg.motion(&mut rng);
    FlowSample::render(texture, cfg.height, cfg.width, motion)
}

pub fn gen_synthetic(seed: u64, count: usize, cfg: &SynthConfig) -> Vec<FlowSample> {
    (0..count as u64).map(|i| sample(seed, i, cfg)).collect()
}

/// First 80% for training, the rest held out.
pub fn split(mut samples: Vec<FlowSample>) -> (Vec<FlowSample>, Vec<FlowSample>) {
    let cut = (samples.len() * 4).div_ceil(5).min(samples.len());
    let holdout = samples.split_off(cut);
    (samples, holdout)
}

/// Bilinearly samples `img` (`[H, W, C]`) at `(x, y)`, clamping to the border.
pub fn bilinear(img: &Tensor<f32>, x: f64, y: f64) -> Vec<f64> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |i: usize, j: usize, k: usize| img.data()[(i * w + j) * c + k] as f64;
    (0..c)
        .map(|k| {
            let top = at(y0, x0, k) * (1.0 - fx) + at(y0, x1, k) * fx;
            let bot = at(y1, x0, k) * (1.0 - fx) + at(y1, x1, k) * fx;
            top * (1.0 - fy) + bot * fy
        })
        .collect()
}

/// Frame 2 backward-warped onto frame 1 by the ground truth.
pub fn backward_warp(sample: &FlowSample) -> Tensor<f32> {
    let (h, w) = sample.size();
    let f = sample.flow.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let v = bilinear(&sample.img2, j as f64 + f[2 * p] as f64, i as f64 + f[2 * p + 1] as f64);
            out.extend(v.into_iter().map(|x| x as f32));
        }
    }
    Tensor::new(&[h, w, 3], out).expect("shape matches")
}
