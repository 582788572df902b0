//! Flow visualisation with the 55-segment Middlebury colour wheel.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SEGMENTS: [(usize, [u8; 3], [u8; 3]); 6] = [
    // (count, start, end) for RY, YG, GC, CB, BM, MR
    (15, [255, 0, 0], [255, 255, 0]),
    (6, [255, 255, 0], [0, 255, 0]),
    (4, [0, 255, 0], [0, 255, 255]),
    (11, [0, 255, 255], [0, 0, 255]),
    (13, [0, 0, 255], [255, 0, 255]),
    (6, [255, 0, 255], [255, 0, 0]),
];

/// The wheel as RGB triples in `[0, 255]`.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(55);
    for (count, start, end) in SEGMENTS {
        for i in 0..count {
            // integer steps as in the reference implementation
            let c = std::array::from_fn(|k| {
                let (s, e) = (start[k] as f64, end[k] as f64);
                (s + ((e - s) * i as f64 / count as f64).trunc()).clamp(0.0, 255.0)
            });
            wheel.push(c);
        }
    }
    wheel
}

/// An 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// 99th percentile of the flow magnitude, or 1 for an all-zero field.
pub fn auto_max_norm<T: Scalar>(field: &Tensor<T>) -> f64 {
    let mut mags: Vec<f64> = field.data().chunks(2).map(|c| c[0].to_f64_lossy().hypot(c[1].to_f64_lossy())).collect();
    mags.sort_by(|a, b| a.total_cmp(b));
    let idx = ((mags.len() as f64 - 1.0) * 0.99).round() as usize;
    match mags.get(idx) {
        Some(&m) if m > 0.0 => m,
        _ => 1.0,
    }
}

/// Renders `[H, W, 2]` flow. Hue follows the flow angle, saturation the
/// magnitude relative to `max_norm` (auto when `None`); zero flow is white.
pub fn flow_to_color<T: Scalar>(field: &Tensor<T>, max_norm: Option<f64>) -> RgbImage {
    let (h, w) = (field.shape()[0], field.shape()[1]);
    let norm = max_norm.filter(|&m| m > 0.0).unwrap_or_else(|| auto_max_norm(field));
    let wheel = color_wheel();
    let ncols = wheel.len();
    let mut pixels = Vec::with_capacity(h * w * 3);
    for uv in field.data().chunks(2) {
        let (u, v) = (uv[0].to_f64_lossy() / norm, uv[1].to_f64_lossy() / norm);
        let rad = u.hypot(v);
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
        let k0 = (fk.floor() as usize).min(ncols - 1);
        let k1 = (k0 + 1) % ncols;
        let f = fk - k0 as f64;
        for ch in 0..3 {
            let col = (1.0 - f) * wheel[k0][ch] / 255.0 + f * wheel[k1][ch] / 255.0;
            let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
            pixels.push((255.0 * col).floor().clamp(0.0, 255.0) as u8);
        }
    }
    RgbImage { width: w, height: h, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wheel_has_55_entries() {
        let w = color_wheel();
        assert_eq!(w.len(), 55);
        assert_eq!(w[0], [255.0, 0.0, 0.0]);
        assert_eq!(w[15], [255.0, 255.0, 0.0]);
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_color(&Tensor::<f32>::zeros(&[3, 4, 2]).unwrap(), None);
        assert!(img.pixels.iter().all(|&p| p == 255));
        assert_eq!((img.width, img.height), (4, 3));
    }

    #[test]
    fn pure_x_flow_single_hue() {
        let f = Tensor::from_fn(&[2, 2, 2], |i| if i % 2 == 0 { 2.0f64 } else { 0.0 }).unwrap();
        let img = flow_to_color(&f, Some(2.0));
        let first = img.pixel(0, 0);
        assert!((0..2).all(|y| (0..2).all(|x| img.pixel(x, y) == first)));
        // rightward motion is the wheel's first entry, pure red
        assert_eq!(first, [255, 0, 0]);
    }

    #[test]
    fn rotational_symmetry() {
        // f(x, y) = (−(y − c), x − c) about the centre of a 5×5 grid
        let n = 5;
        let c = 2.0;
        let f = Tensor::from_fn(&[n, n, 2], |i| {
            let (pix, k) = (i / 2, i % 2);
            let (y, x) = ((pix / n) as f64, (pix % n) as f64);
            if k == 0 {
                -(y - c)
            } else {
                x - c
            }
        })
        .unwrap();
        let img = flow_to_color(&f, Some(3.0));
        // a quarter turn of the grid maps to a quarter turn of the hue;
        // magnitudes (saturation) must be invariant, so compare distance from white
        let sat = |p: [u8; 3]| p.iter().map(|&v| 255 - v as i32).max().unwrap();
        for y in 0..n {
            for x in 0..n {
                let (rx, ry) = (n - 1 - y, x);
                assert_eq!(sat(img.pixel(x, y)), sat(img.pixel(rx, ry)));
            }
        }
        // opposite points have opposite hues, so never the same colour
        assert_ne!(img.pixel(0, 2), img.pixel(4, 2));
    }
}
