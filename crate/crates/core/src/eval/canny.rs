//! Canny edge detection for `[0, 1]` slices.

use crate::image::{ImageSlice, PathologyMask};

pub const CANNY_SIGMA: f64 = 1.0;
pub const CANNY_LOW: f64 = 0.1;
pub const CANNY_HIGH: f64 = 0.2;

/// Edges with Gaussian smoothing `sigma` and hysteresis thresholds
/// `(low, high)` applied to the Sobel magnitude scaled by 1/4, so a unit step
/// yields a response of about 1. Borders replicate edge pixels.
pub fn canny(img: &ImageSlice, sigma: f64, low: f64, high: f64) -> PathologyMask {
    let (h, w) = img.shape();
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let smooth = gaussian_blur(&src, h, w, sigma);
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        smooth[r * w + c]
    };
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1)
                - at(r - 1, c - 1)
                - 2.0 * at(r, c - 1)
                - at(r + 1, c - 1))
                / 4.0;
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1)
                - at(r - 1, c - 1)
                - 2.0 * at(r - 1, c)
                - at(r - 1, c + 1))
                / 4.0;
            let k = r as usize * w + c as usize;
            mag[k] = (gx * gx + gy * gy).sqrt();
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[k] = if !(22.5..157.5).contains(&angle) {
                0
            } else if angle < 67.5 {
                1
            } else if angle < 112.5 {
                2
            } else {
                3
            };
        }
    }

    // Non-maximum suppression along the quantised gradient direction.
    let m = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            mag[r as usize * w + c as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let k = r as usize * w + c as usize;
            let (dr, dc) = match dir[k] {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let v = mag[k];
            if v > 0.0 && v >= m(r + dr, c + dc) && v >= m(r - dr, c - dc) {
                thin[k] = v;
            }
        }
    }

    // Hysteresis: strong pixels seed, weak pixels join when 8-connected.
    let mut edge = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|&k| thin[k] >= high).collect();
    for &k in &stack {
        edge[k] = true;
    }
    while let Some(k) = stack.pop() {
        let (r, c) = ((k / w) as isize, (k % w) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (y, x) = (r + dr, c + dc);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let j = y as usize * w + x as usize;
                if !edge[j] && thin[j] >= low {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    PathologyMask::from_fn(h, w, |r, c| edge[r * w + c])
}

/// [`canny`] with the default parameters.
pub fn edge_map(img: &ImageSlice) -> PathologyMask {
    canny(img, CANNY_SIGMA, CANNY_LOW, CANNY_HIGH)
}

/// Edge map as a `{0, 1}` image.
pub fn edge_image(img: &ImageSlice) -> ImageSlice {
    let e = edge_map(img);
    let (h, w) = e.shape();
    ImageSlice::from_fn(h, w, |r, c| f32::from(u8::from(e.get(r, c))))
}

fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let pass = |input: &[f64], horizontal: bool| {
        let mut out = vec![0.0; h * w];
        for r in 0..h as isize {
            for c in 0..w as isize {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let d = t as isize - radius;
                    let (y, x) = if horizontal { (r, c + d) } else { (r + d, c) };
                    let y = y.clamp(0, h as isize - 1) as usize;
                    let x = x.clamp(0, w as isize - 1) as usize;
                    acc += kv * input[y * w + x];
                }
                out[r as usize * w + c as usize] = acc;
            }
        }
        out
    };
    let tmp = pass(src, true);
    pass(&tmp, false)
}
