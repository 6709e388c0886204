//! 2D convolution kernels (im2col + GEMM).
//!
//! Layouts: inputs `[batch, in_c, h, w]`, weights `[out_c, in_c, k, k]`,
//! outputs `[batch, out_c, out_h, out_w]`. Every routine here is a plain
//! function of its arguments; the graph in [`crate::graph`] composes them
//! into differentiable ops.

use crate::{ShapeError, Tensor};

/// Geometry of a square-kernel convolution applied to one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<Self, ShapeError> {
        if stride == 0 || kernel == 0 || in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return Err(ShapeError::Conv {
                detail: format!(
                    "kernel {kernel} stride {stride} pad {pad} does not fit input {in_h}x{in_w}"
                ),
            });
        }
        Ok(Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    /// Geometry for an input tensor and weight tensor pair.
    pub fn for_input(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Self, ShapeError> {
        let (_, in_c, in_h, in_w) = x.dims4()?;
        let (out_c, w_in, kh, kw) = w.dims4()?;
        if w_in != in_c || kh != kw {
            return Err(ShapeError::Mismatch {
                expected: vec![out_c, in_c, kh, kh],
                actual: w.shape().to_vec(),
            });
        }
        Self::new(in_c, out_c, kh, stride, pad, in_h, in_w)
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let k = g.kernel;
    let cols = g.col_cols();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.in_w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let k = g.kernel;
    let cols = g.col_cols();
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `c = beta * c + op(a) * op(b)` for row-major matrices, where `op` is an
/// optional transpose. `a` is `m x k` after `op`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index matrixmultiply derives from
    // (m, k, n) and the strides chosen for the row-major/transposed layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution with optional per-output-channel bias.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor, ShapeError> {
    let g = ConvGeom::for_input(x, w, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.out_c {
            return Err(ShapeError::Mismatch {
                expected: vec![g.out_c],
                actual: b.shape().to_vec(),
            });
        }
    }
    let batch = x.batch();
    let mut out = vec![0.0; batch * g.out_len()];
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for s in 0..batch {
        im2col(x.sample(s), &g, &mut col);
        let dst = &mut out[s * g.out_len()..(s + 1) * g.out_len()];
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_mut(g.col_cols()).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(g.out_c, g.col_rows(), g.col_cols(), w.data(), false, &col, false, beta, dst);
    }
    Tensor::new([batch, g.out_c, g.out_h, g.out_w], out)
}

/// Gradient of a convolution with respect to its input, i.e. the transposed
/// convolution of `dy` with `w` back onto the input geometry `g`.
pub fn conv2d_input_grad(dy: &Tensor, w: &Tensor, g: &ConvGeom) -> Result<Tensor, ShapeError> {
    let (batch, oc, oh, ow) = dy.dims4()?;
    if oc != g.out_c || oh != g.out_h || ow != g.out_w {
        return Err(ShapeError::Mismatch {
            expected: vec![batch, g.out_c, g.out_h, g.out_w],
            actual: dy.shape().to_vec(),
        });
    }
    let mut dx = vec![0.0; batch * g.in_len()];
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for s in 0..batch {
        gemm(g.col_rows(), g.out_c, g.col_cols(), w.data(), true, dy.sample(s), false, 0.0, &mut col);
        col2im_add(&col, g, &mut dx[s * g.in_len()..(s + 1) * g.in_len()]);
    }
    Tensor::new([batch, g.in_c, g.in_h, g.in_w], dx)
}

/// Gradient of a convolution with respect to its weights, summed over the batch.
pub fn conv2d_weight_grad(x: &Tensor, dy: &Tensor, g: &ConvGeom) -> Result<Tensor, ShapeError> {
    let batch = x.batch();
    if dy.batch() != batch || dy.sample_len() != g.out_len() {
        return Err(ShapeError::Mismatch {
            expected: vec![batch, g.out_c, g.out_h, g.out_w],
            actual: dy.shape().to_vec(),
        });
    }
    let mut dw = vec![0.0; g.out_c * g.col_rows()];
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for s in 0..batch {
        im2col(x.sample(s), g, &mut col);
        gemm(g.out_c, g.col_cols(), g.col_rows(), dy.sample(s), false, &col, true, 1.0, &mut dw);
    }
    Tensor::new([g.out_c, g.in_c, g.kernel, g.kernel], dw)
}

/// Bias gradient: `dy` summed over batch and spatial positions.
pub fn conv2d_bias_grad(dy: &Tensor) -> Result<Tensor, ShapeError> {
    let (batch, oc, oh, ow) = dy.dims4()?;
    let mut db = vec![0.0; oc];
    for s in 0..batch {
        for (c, chunk) in dy.sample(s).chunks(oh * ow).enumerate() {
            db[c] += chunk.iter().sum::<f64>();
        }
    }
    Tensor::new([oc], db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    // Direct seven-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (oc, _, k, _) = w.dims4().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros([n, oc, oh, ow]);
        for s in 0..n {
            for o in 0..oc {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.data()[o];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (i * stride + ki) as isize - pad as isize;
                                    let iw = (j * stride + kj) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * c + ci) * k + ki) * k + kj]
                                        * x.data()[((s * c + ci) * h + ih as usize) * wd + iw as usize];
                                }
                            }
                        }
                        out.data_mut()[((s * oc + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, pad) in &[(3, 1, 1), (4, 2, 1), (1, 1, 0), (3, 2, 1)] {
            let x = random(&[2, 3, 7, 6], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let fast = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let slow = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_and_weight_grads_are_adjoint() {
        // <conv(x, w), dy> must equal <x, input_grad(dy)> and <w, weight_grad(x, dy)>.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 2, 8, 8], &mut rng);
        let w = random(&[3, 2, 4, 4], &mut rng);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        let dy = random(y.shape(), &mut rng);
        let g = ConvGeom::for_input(&x, &w, 2, 1).unwrap();
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&y, &dy);
        let dx = conv2d_input_grad(&dy, &w, &g).unwrap();
        let dw = conv2d_weight_grad(&x, &dy, &g).unwrap();
        assert!((lhs - dot(&x, &dx)).abs() < 1e-10);
        assert!((lhs - dot(&w, &dw)).abs() < 1e-10);
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        assert!(ConvGeom::new(1, 1, 5, 1, 0, 3, 3).is_err());
    }
}
