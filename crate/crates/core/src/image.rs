//! 2D slices, binary pathology masks and their batch tensor forms.

use pseudoheal_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A single grayscale slice with intensities nominally in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSlice {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageSlice {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Validation(format!(
                "image of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Product with `(1 - mask)`: zeroes the pathology region.
    pub fn outside(&self, mask: &PathologyMask) -> Self {
        let data = self
            .data
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| if m == 1 { 0.0 } else { v })
            .collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn mean_abs_diff(&self, other: &ImageSlice) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }
}

/// A binary pathology mask; every value is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PathologyMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl PathologyMask {
    /// Fails with a validation error when any value is not 0 or 1.
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Validation(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("mask value {bad} is not binary")));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self { height, width, data }
    }

    /// Thresholds soft values (`> threshold` is pathology).
    pub fn from_soft(height: usize, width: usize, soft: &[f64], threshold: f64) -> Self {
        assert_eq!(soft.len(), height * width);
        Self {
            height,
            width,
            data: soft.iter().map(|&v| u8::from(v > threshold)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn intersection(&self, other: &PathologyMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a == 1 && b == 1).count()
    }

    /// Intersection over union; 0 when both masks are empty.
    pub fn iou(&self, other: &PathologyMask) -> f64 {
        let inter = self.intersection(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Mean `(row, col)` of the set pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.count();
        if n == 0 {
            return None;
        }
        let (mut sr, mut sc) = (0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    sr += r as f64;
                    sc += c as f64;
                }
            }
        }
        Some((sr / n as f64, sc / n as f64))
    }

    /// Translation with zero fill.
    pub fn shifted(&self, d_row: isize, d_col: isize) -> Self {
        Self::from_fn(self.height, self.width, |r, c| {
            let sr = r as isize - d_row;
            let sc = c as isize - d_col;
            sr >= 0
                && sc >= 0
                && (sr as usize) < self.height
                && (sc as usize) < self.width
                && self.get(sr as usize, sc as usize)
        })
    }

    /// Binary dilation with a square structuring element of the given radius.
    pub fn dilated(&self, radius: usize) -> Self {
        let r = radius as isize;
        Self::from_fn(self.height, self.width, |row, col| {
            (-r..=r).any(|dr| {
                (-r..=r).any(|dc| {
                    let (y, x) = (row as isize + dr, col as isize + dc);
                    y >= 0
                        && x >= 0
                        && (y as usize) < self.height
                        && (x as usize) < self.width
                        && self.get(y as usize, x as usize)
                })
            })
        })
    }

    pub fn flipped_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn flipped_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(self.height - 1 - r, c))
    }
}

/// Slice-level label: healthy iff the pathology mask is empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Healthy,
    Pathological,
}

/// Stacks images into a `[B, 1, H, W]` tensor.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a ImageSlice>) -> Result<Tensor> {
    let mut shape = None;
    let mut data = Vec::new();
    let mut batch = 0;
    for img in images {
        match shape {
            None => shape = Some(img.shape()),
            Some(s) if s != img.shape() => {
                return Err(Error::Validation(format!(
                    "batch mixes slice shapes {:?} and {:?}",
                    s,
                    img.shape()
                )))
            }
            _ => {}
        }
        data.extend(img.data().iter().map(|&v| v as f64));
        batch += 1;
    }
    let (h, w) = shape.ok_or_else(|| Error::Validation("empty image batch".into()))?;
    Ok(Tensor::new([batch, 1, h, w], data)?)
}

/// Stacks masks into a `[B, 1, H, W]` tensor of zeros and ones.
pub fn masks_to_tensor<'a>(masks: impl IntoIterator<Item = &'a PathologyMask>) -> Result<Tensor> {
    let mut shape = None;
    let mut data = Vec::new();
    let mut batch = 0;
    for m in masks {
        match shape {
            None => shape = Some(m.shape()),
            Some(s) if s != m.shape() => {
                return Err(Error::Validation(format!(
                    "batch mixes mask shapes {:?} and {:?}",
                    s,
                    m.shape()
                )))
            }
            _ => {}
        }
        data.extend(m.data().iter().map(|&v| v as f64));
        batch += 1;
    }
    let (h, w) = shape.ok_or_else(|| Error::Validation("empty mask batch".into()))?;
    Ok(Tensor::new([batch, 1, h, w], data)?)
}

/// Splits a `[B, 1, H, W]` tensor back into slices (values rounded to `f32`).
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageSlice>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::Validation(format!("expected one channel, got {c}")));
    }
    Ok((0..b)
        .map(|s| ImageSlice {
            height: h,
            width: w,
            data: t.sample(s).iter().map(|&v| v as f32).collect(),
        })
        .collect())
}

/// Splits a `[B, 1, H, W]` soft-mask tensor into per-sample value vectors.
pub fn tensor_to_soft(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let b = t.dims4()?.0;
    Ok((0..b).map(|s| t.sample(s).to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rejects_non_binary() {
        assert!(PathologyMask::new(1, 2, vec![0, 2]).is_err());
        assert!(PathologyMask::new(1, 2, vec![0, 1]).is_ok());
    }

    #[test]
    fn iou_and_shift() {
        let m = PathologyMask::from_fn(8, 8, |r, c| (2..4).contains(&r) && (2..4).contains(&c));
        assert_eq!(m.count(), 4);
        let s = m.shifted(0, 1);
        assert_eq!(s.intersection(&m), 2);
        assert!((m.iou(&s) - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.shifted(0, 8).count(), 0);
    }

    #[test]
    fn tensor_round_trip_preserves_f32_values() {
        let a = ImageSlice::from_fn(3, 4, |r, c| (r * 4 + c) as f32 / 11.0);
        let t = images_to_tensor([&a, &a]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 3, 4]);
        assert_eq!(tensor_to_images(&t).unwrap()[1], a);
    }
}
