//! Structural similarity with an 11-tap Gaussian window (sigma 1.5), valid
//! filtering, and its multi-scale form.

use crate::image::ImageSlice;
use crate::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Standard per-scale exponents, finest scale first.
pub const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Normalised 1D Gaussian taps.
pub fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// A row-major `f64` plane.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn from_slice(s: &ImageSlice) -> Self {
        Self {
            h: s.height(),
            w: s.width(),
            v: s.data().iter().map(|&x| x as f64).collect(),
        }
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Separable valid-mode filtering with the Gaussian window.
    fn filter(&self, k: &[f64; WINDOW]) -> Plane {
        let (oh, ow) = (self.h + 1 - WINDOW, self.w + 1 - WINDOW);
        let mut rows = vec![0.0; self.h * ow];
        for r in 0..self.h {
            for c in 0..ow {
                rows[r * ow + c] = (0..WINDOW).map(|t| k[t] * self.v[r * self.w + c + t]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                out[r * ow + c] = (0..WINDOW).map(|t| k[t] * rows[(r + t) * ow + c]).sum();
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    /// 2x2 average pooling (odd trailing rows/columns dropped).
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let at = |y: usize, x: usize| self.v[y * self.w + x];
                v.push(0.25 * (at(2 * r, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c) + at(2 * r + 1, 2 * c + 1)));
            }
        }
        Plane { h, w, v }
    }
}

/// Mean luminance-contrast-structure SSIM and mean contrast-structure term.
fn ssim_terms(a: &Plane, b: &Plane) -> (f64, f64) {
    let k = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mu_a = a.filter(&k);
    let mu_b = b.filter(&k);
    let aa = a.zip(a, |x, y| x * y).filter(&k);
    let bb = b.zip(b, |x, y| x * y).filter(&k);
    let ab = a.zip(b, |x, y| x * y).filter(&k);
    let n = mu_a.v.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let s = (2.0 * cov + c2) / (va + vb + c2);
        ssim += l * s;
        cs += s;
    }
    (ssim / n, cs / n)
}

fn check(a: &ImageSlice, b: &ImageSlice) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Validation(format!(
            "SSIM needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.height() < WINDOW || a.width() < WINDOW {
        return Err(Error::Validation(format!(
            "image {:?} is smaller than the {WINDOW}x{WINDOW} window",
            a.shape()
        )));
    }
    Ok(())
}

/// Single-scale SSIM.
pub fn ssim(a: &ImageSlice, b: &ImageSlice) -> Result<f64> {
    check(a, b)?;
    Ok(ssim_terms(&Plane::from_slice(a), &Plane::from_slice(b)).0)
}

/// Number of scales used for an image of the given shape: every scale whose
/// shorter side still holds a full window, at most five.
pub fn scale_count(h: usize, w: usize) -> usize {
    let mut n = 0;
    let mut side = h.min(w);
    while n < MS_WEIGHTS.len() && side >= WINDOW {
        n += 1;
        side /= 2;
    }
    n
}

/// Multi-scale SSIM with the standard exponents truncated to the available
/// scales and renormalised to sum to one. Negative terms are clamped to 0.
pub fn ms_ssim(a: &ImageSlice, b: &ImageSlice) -> Result<f64> {
    check(a, b)?;
    let scales = scale_count(a.height(), a.width());
    let total: f64 = MS_WEIGHTS[..scales].iter().sum();
    let (mut pa, mut pb) = (Plane::from_slice(a), Plane::from_slice(b));
    let mut value = 1.0;
    for (j, w) in MS_WEIGHTS[..scales].iter().enumerate() {
        let (s, cs) = ssim_terms(&pa, &pb);
        let term = if j + 1 == scales { s } else { cs };
        value *= term.max(0.0).powf(w / total);
        pa = pa.downsample();
        pb = pb.downsample();
    }
    Ok(value)
}
