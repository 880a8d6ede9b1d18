use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::{Scalar, Tensor};

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `height · width · 3` bytes, row-major.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// `[H, W, 3]` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        let data = self
            .pixels
            .iter()
            .map(|&p| F::from_f64(p as f64 / 255.0))
            .collect();
        Tensor::new([self.height, self.width, 3], data).expect("consistent")
    }

    /// Quantizes an `[H, W, 3]` tensor in `[0, 1]` (values are clamped).
    pub fn from_tensor<F: Scalar>(t: &Tensor<F>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Data(format!("expected [H, W, 3], got {s:?}")));
        }
        let pixels = t
            .data()
            .iter()
            .map(|v| libm::round(v.to_f64().clamp(0.0, 1.0) * 255.0) as u8)
            .collect();
        Self::new(s[1], s[0], pixels)
    }
}

/// Handling of the area a rotation exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotateMode {
    /// Zoom into the largest centered window that stays inside the rotated
    /// content, so nothing is padded and the periphery is lost.
    Crop,
    /// Keep the frame; exposed corners are filled with zeros.
    Pad,
}

/// Nearest-neighbor rotation of an `[H, W, C]` image about its center.
pub fn image_level_rotate<F: Scalar>(image: &Tensor<F>, theta_degrees: f64, mode: RotateMode) -> Tensor<F> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let theta = theta_degrees.to_radians();
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let zoom = match mode {
        RotateMode::Pad => 1.0,
        RotateMode::Crop => 1.0 / (libm::fabs(cos) + libm::fabs(sin)),
    };
    let cr = (h as f64 - 1.0) / 2.0;
    let cc = (w as f64 - 1.0) / 2.0;
    let src = image.data();
    let mut out = vec![F::ZERO; src.len()];
    for r in 0..h {
        for col in 0..w {
            let (dr, dc) = ((r as f64 - cr) * zoom, (col as f64 - cc) * zoom);
            let mut sr = libm::round(dr * cos + dc * sin + cr);
            let mut sc = libm::round(-dr * sin + dc * cos + cc);
            if mode == RotateMode::Crop {
                sr = sr.clamp(0.0, h as f64 - 1.0);
                sc = sc.clamp(0.0, w as f64 - 1.0);
            }
            if sr < 0.0 || sc < 0.0 || sr >= h as f64 || sc >= w as f64 {
                continue;
            }
            let from = (sr as usize * w + sc as usize) * c;
            let to = (r * w + col) * c;
            out[to..to + c].copy_from_slice(&src[from..from + c]);
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Zero-pads by `pad` pixels on every side and crops a random `H × W` window.
pub fn pad_crop<F: Scalar>(image: &Tensor<F>, pad: usize, rng: &mut Rng) -> Tensor<F> {
    if pad == 0 {
        return image.clone();
    }
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let oy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let ox = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let src = image.data();
    let mut out = vec![F::ZERO; src.len()];
    for r in 0..h {
        let sr = r as isize + oy;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        for col in 0..w {
            let sc = col as isize + ox;
            if sc < 0 || sc >= w as isize {
                continue;
            }
            let from = (sr as usize * w + sc as usize) * c;
            let to = (r * w + col) * c;
            out[to..to + c].copy_from_slice(&src[from..from + c]);
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// With probability `prob`, fills a random rectangle (2–40% of the area,
/// aspect 0.3–3.3) with `fill`.
pub fn random_erasing<F: Scalar>(image: &mut Tensor<F>, prob: f64, fill: &[F], rng: &mut Rng) {
    if prob <= 0.0 || rng.random::<f64>() >= prob {
        return;
    }
    let s = image.shape().to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    for _ in 0..100 {
        let area = rng.random_range(0.02..0.4) * (h * w) as f64;
        let aspect = libm::exp(rng.random_range(libm::log(0.3)..libm::log(1.0 / 0.3)));
        let eh = libm::round(libm::sqrt(area * aspect)) as usize;
        let ew = libm::round(libm::sqrt(area / aspect)) as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        let data = image.data_mut();
        for r in top..top + eh {
            for col in left..left + ew {
                for ch in 0..c {
                    data[(r * w + col) * c + ch] = fill[ch % fill.len()];
                }
            }
        }
        return;
    }
}
