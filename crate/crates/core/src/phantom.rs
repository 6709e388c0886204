//! Procedural brain-like phantom slices with optional bright lesions and
//! mass-effect deformations.
//!
//! Anatomy is a set of nested, jittered ellipses (cortex ring, white matter,
//! deep nucleus, ventricle) plus smooth texture and a few small dark blobs, so
//! every subject carries its own structural detail. Lesions are additive
//! hyper-intense disks with a one-pixel feathered rim.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{ImageSlice, Label, PathologyMask};
use crate::{Error, Result};

/// Upper bound of healthy tissue intensity, kept below 1 so lesions can
/// always brighten a pixel.
const MAX_TISSUE: f32 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub lesion_probability: f64,
    /// Additive brightness of the lesion core.
    pub lesion_intensity: f64,
    /// Inclusive `(min, max)` lesion radius in pixels.
    pub lesion_radius_range: (usize, usize),
    pub deform: bool,
    /// With `deform`, warp only slices that carry a lesion (mass effect).
    pub deform_lesions_only: bool,
    /// Peak displacement of the deformation field in pixels.
    pub deform_magnitude: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: (64, 64),
            lesion_probability: 0.5,
            lesion_intensity: 0.5,
            lesion_radius_range: (3, 7),
            deform: false,
            deform_lesions_only: false,
            deform_magnitude: 3.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::config("image_size", format!("{h}x{w} is below the 16x16 minimum")));
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(Error::config("lesion_probability", "must lie in [0, 1]"));
        }
        if !(self.lesion_intensity > 0.0 && self.lesion_intensity <= 1.0) {
            return Err(Error::config("lesion_intensity", "must lie in (0, 1]"));
        }
        let (lo, hi) = self.lesion_radius_range;
        let cap = h.min(w) / 4;
        if lo < 1 || lo > cap || hi < lo || hi > cap {
            return Err(Error::config(
                "lesion_radius_range",
                format!("({lo}, {hi}) must satisfy 1 <= min <= max <= {cap}"),
            ));
        }
        if !(self.deform_magnitude >= 0.0 && self.deform_magnitude.is_finite()) {
            return Err(Error::config("deform_magnitude", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: ImageSlice,
    pub mask: PathologyMask,
    pub label: Label,
    pub subject_id: u64,
    pub deformed: bool,
}

/// Ground truth kept next to each generated sample for oracle tests.
#[derive(Clone, Debug)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct Latent {
    pub healthy: ImageSlice,
    pub lesion: Option<Lesion>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Lesion {
    pub center: (usize, usize),
    pub radius: usize,
}

/// Generates `n` samples. Sample `i` draws from its own ChaCha stream of
/// `spec.seed`, so output is a pure function of `(spec, i)`.
pub fn generate_phantom(spec: &PhantomSpec, n: usize) -> Result<Vec<PhantomSample>> {
    Ok(generate_with_latent(spec, n)?.into_iter().map(|(s, _)| s).collect())
}

pub(crate) fn generate_with_latent(spec: &PhantomSpec, n: usize) -> Result<Vec<(PhantomSample, Latent)>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("n", "at least one sample is required"));
    }
    Ok((0..n).map(|i| generate_one(spec, i as u64)).collect())
}

fn generate_one(spec: &PhantomSpec, index: u64) -> (PhantomSample, Latent) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (h, w) = spec.image_size;
    let anatomy = Anatomy::sample(h, w, &mut rng);
    let mut healthy = anatomy.render();

    let has_lesion = rng.gen_bool(spec.lesion_probability);
    let lesion = has_lesion.then(|| anatomy.place_lesion(spec.lesion_radius_range, &mut rng));
    let deform_seed: u64 = rng.gen();
    let deformed = spec.deform && spec.deform_magnitude > 0.0 && (has_lesion || !spec.deform_lesions_only);
    if deformed {
        let center = lesion.map(|l| (l.center.0 as f64, l.center.1 as f64));
        healthy = apply_deformation(&healthy, spec.deform_magnitude, deform_seed, center);
    }

    let mut image = healthy.clone();
    let mask = match lesion {
        Some(l) => {
            add_lesion(&mut image, l, spec.lesion_intensity as f32);
            disk_mask(h, w, l.center, l.radius)
        }
        None => PathologyMask::empty(h, w),
    };
    let label = if mask.is_empty() { Label::Healthy } else { Label::Pathological };
    (
        PhantomSample {
            image,
            mask,
            label,
            subject_id: index,
            deformed,
        },
        Latent { healthy, lesion },
    )
}

/// Rasterised disk: pixels whose squared distance to `center` is at most `radius^2`.
pub fn disk_mask(h: usize, w: usize, center: (usize, usize), radius: usize) -> PathologyMask {
    let (cy, cx) = (center.0 as i64, center.1 as i64);
    let r2 = (radius * radius) as i64;
    PathologyMask::from_fn(h, w, |r, c| {
        let (dy, dx) = (r as i64 - cy, c as i64 - cx);
        dy * dy + dx * dx <= r2
    })
}

fn add_lesion(image: &mut ImageSlice, lesion: Lesion, intensity: f32) {
    let (h, w) = image.shape();
    let (cy, cx) = (lesion.center.0 as f32, lesion.center.1 as f32);
    let r = lesion.radius as f32;
    for row in 0..h {
        for col in 0..w {
            let d = ((row as f32 - cy).powi(2) + (col as f32 - cx).powi(2)).sqrt();
            // Full strength inside the disk, linear fall-off over one pixel outside.
            let profile = (r + 1.0 - d).clamp(0.0, 1.0);
            if profile > 0.0 {
                let v = image.get(row, col) + intensity * profile;
                image.set(row, col, v.min(1.0));
            }
        }
    }
}

struct Ellipse {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    cos: f32,
    sin: f32,
}

impl Ellipse {
    /// Normalised radius: 1 on the boundary.
    fn rho(&self, row: f32, col: f32) -> f32 {
        let (dy, dx) = (row - self.cy, col - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    /// Anti-aliased inside indicator with a one-pixel ramp.
    fn coverage(&self, row: f32, col: f32, scale: f32) -> f32 {
        let edge = self.rx.min(self.ry) * scale;
        ((1.0 - self.rho(row, col) / scale) * edge + 0.5).clamp(0.0, 1.0)
    }
}

struct Wave {
    fy: f32,
    fx: f32,
    phase: f32,
    amp: f32,
}

struct Blob {
    cy: f32,
    cx: f32,
    sigma: f32,
    depth: f32,
}

struct Anatomy {
    h: usize,
    w: usize,
    outer: Ellipse,
    ventricle: Ellipse,
    nucleus: Ellipse,
    cortex_level: f32,
    white_level: f32,
    nucleus_level: f32,
    ventricle_level: f32,
    cortex_width: f32,
    waves: Vec<Wave>,
    blobs: Vec<Blob>,
}

impl Anatomy {
    fn sample(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let (hf, wf) = (h as f32, w as f32);
        let cy = hf / 2.0 + rng.gen_range(-1.5..1.5);
        let cx = wf / 2.0 + rng.gen_range(-1.5..1.5);
        let theta: f32 = rng.gen_range(-0.15..0.15);
        let outer = Ellipse {
            cy,
            cx,
            ry: hf * 0.42 * rng.gen_range(0.93..1.05),
            rx: wf * 0.36 * rng.gen_range(0.93..1.05),
            cos: theta.cos(),
            sin: theta.sin(),
        };
        let vt: f32 = theta + rng.gen_range(-0.2..0.2);
        let ventricle = Ellipse {
            cy: cy + rng.gen_range(-2.0..2.0),
            cx: cx + rng.gen_range(-1.5..1.5),
            ry: outer.ry * rng.gen_range(0.22..0.32),
            rx: outer.rx * rng.gen_range(0.10..0.18),
            cos: vt.cos(),
            sin: vt.sin(),
        };
        let nt: f32 = rng.gen_range(-0.5..0.5);
        let nucleus = Ellipse {
            cy: cy + rng.gen_range(-3.0..3.0),
            cx: cx + rng.gen_range(-3.0..3.0),
            ry: outer.ry * rng.gen_range(0.40..0.52),
            rx: outer.rx * rng.gen_range(0.30..0.45),
            cos: nt.cos(),
            sin: nt.sin(),
        };
        let waves = (0..4)
            .map(|_| Wave {
                fy: rng.gen_range(0.5..3.0) * std::f32::consts::TAU / hf,
                fx: rng.gen_range(0.5..3.0) * std::f32::consts::TAU / wf,
                phase: rng.gen_range(0.0..std::f32::consts::TAU),
                amp: rng.gen_range(0.01..0.025),
            })
            .collect();
        let n_blobs = rng.gen_range(4..8);
        let blobs = (0..n_blobs)
            .map(|_| {
                let a: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
                let rr: f32 = rng.gen_range(0.2..0.8);
                Blob {
                    cy: cy + a.sin() * rr * outer.ry,
                    cx: cx + a.cos() * rr * outer.rx,
                    sigma: rng.gen_range(0.9..1.8),
                    depth: rng.gen_range(0.08..0.18),
                }
            })
            .collect();
        Self {
            h,
            w,
            outer,
            ventricle,
            nucleus,
            cortex_level: rng.gen_range(0.52..0.60),
            white_level: rng.gen_range(0.36..0.42),
            nucleus_level: rng.gen_range(0.45..0.50),
            ventricle_level: rng.gen_range(0.10..0.16),
            cortex_width: rng.gen_range(0.12..0.18),
            waves,
            blobs,
        }
    }

    fn render(&self) -> ImageSlice {
        ImageSlice::from_fn(self.h, self.w, |r, c| {
            let (y, x) = (r as f32, c as f32);
            let brain = self.outer.coverage(y, x, 1.0);
            if brain <= 0.0 {
                return 0.0;
            }
            let white = self.outer.coverage(y, x, 1.0 - self.cortex_width);
            let mut v = self.cortex_level + (self.white_level - self.cortex_level) * white;
            let nuc = self.nucleus.coverage(y, x, 1.0);
            v += (self.nucleus_level - v) * nuc;
            let vent = self.ventricle.coverage(y, x, 1.0);
            v += (self.ventricle_level - v) * vent;
            for wave in &self.waves {
                v += wave.amp * (wave.fy * y + wave.fx * x + wave.phase).sin();
            }
            for b in &self.blobs {
                let d2 = (y - b.cy).powi(2) + (x - b.cx).powi(2);
                v -= b.depth * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
            }
            (v * brain).clamp(0.0, MAX_TISSUE)
        })
    }

    fn place_lesion(&self, radius_range: (usize, usize), rng: &mut ChaCha8Rng) -> Lesion {
        let radius = rng.gen_range(radius_range.0..=radius_range.1);
        let r = radius as f32;
        for _ in 0..256 {
            let row = rng.gen_range(radius + 1..self.h - radius - 1);
            let col = rng.gen_range(radius + 1..self.w - radius - 1);
            // Keep the whole disk well inside the brain outline.
            let margin = 1.0 - (r + 1.0) / self.outer.rx.min(self.outer.ry);
            if self.outer.rho(row as f32, col as f32) <= margin.max(0.0) {
                return Lesion {
                    center: (row, col),
                    radius,
                };
            }
        }
        Lesion {
            center: (self.outer.cy.round() as usize, self.outer.cx.round() as usize),
            radius,
        }
    }
}

/// Warps `image` with a smooth radial push centred on `center` (image centre
/// when `None`). The displacement at distance `d` is
/// `magnitude * (d / s) * exp((1 - d^2 / s^2) / 2)`, peaking at exactly
/// `magnitude` pixels when `d = s`; the width `s` is jittered by `seed`.
/// Sampling is bilinear with edge clamping.
pub fn apply_deformation(image: &ImageSlice, magnitude: f64, seed: u64, center: Option<(f64, f64)>) -> ImageSlice {
    if magnitude <= 0.0 {
        return image.clone();
    }
    let (h, w) = image.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = h.min(w) as f64 / 6.0 * rng.gen_range(0.85..1.15);
    let (cy, cx) = center.unwrap_or(((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0));
    ImageSlice::from_fn(h, w, |r, c| {
        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
        let d = (dy * dy + dx * dx).sqrt();
        if d < 1e-9 {
            return image.get(r, c);
        }
        let t = d / width;
        let push = magnitude * t * ((1.0 - t * t) / 2.0).exp();
        // Content moves outward, so each output pixel reads from closer in.
        let scale = (d - push).max(0.0) / d;
        bilinear(image, cy + dy * scale, cx + dx * scale)
    })
}

fn bilinear(image: &ImageSlice, y: f64, x: f64) -> f32 {
    let (h, w) = image.shape();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = image.get(y0, x0) as f64 * (1.0 - fx) + image.get(y0, x1) as f64 * fx;
    let bottom = image.get(y1, x0) as f64 * (1.0 - fx) + image.get(y1, x1) as f64 * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}
