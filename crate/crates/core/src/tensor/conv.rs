//! Convolution kernels: im2col / col2im plus forward and backward passes.
//!
//! `conv2d` computes cross-correlation (no kernel flip) with per-axis stride,
//! zero padding and dilation. The inner product is delegated to a GEMM over
//! the im2col matrix, one image at a time, so the output slab for image `n`
//! lands directly in `(C_out, OH, OW)` order.

use serde::{Deserialize, Serialize};

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Stride, padding, dilation and kernel extents of a conv or pool window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    /// (kh, kw), both >= 1.
    pub kernel: (usize, usize),
    /// (sh, sw), both >= 1.
    pub stride: (usize, usize),
    /// (ph, pw), zero padding on each side.
    pub padding: (usize, usize),
    /// (dh, dw), tap spacing; 1 = dense.
    pub dilation: (usize, usize),
}

impl ConvParams {
    /// Square kernel, stride 1, dilation 1, explicit padding.
    pub fn simple(kernel: usize, padding: usize) -> Self {
        ConvParams {
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (padding, padding),
            dilation: (1, 1),
        }
    }

    /// Square kernel with stride and dilation; padding chosen by the caller.
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize), dilation: (usize, usize)) -> Self {
        ConvParams { kernel, stride, padding, dilation }
    }

    /// Effective kernel extent per axis: `k + (k-1)(d-1)`.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            self.kernel.0 + (self.kernel.0 - 1) * (self.dilation.0 - 1),
            self.kernel.1 + (self.kernel.1 - 1) * (self.dilation.1 - 1),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::InvalidParam("kernel extents must be positive".into()));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::InvalidParam("stride must be positive".into()));
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(Error::InvalidParam("dilation must be positive".into()));
        }
        Ok(())
    }

    /// Output spatial extents for an `(h, w)` input; errors when an extent
    /// would drop below 1.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (keh, kew) = self.effective_kernel();
        let oh = extent(h, self.padding.0, keh, self.stride.0);
        let ow = extent(w, self.padding.1, kew, self.stride.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::InvalidParam(format!(
                "non-positive output extent for input {}x{} with kernel {:?} pad {:?} stride {:?} dilation {:?}",
                h, w, self.kernel, self.padding, self.stride, self.dilation
            ))),
        }
    }
}

fn extent(input: usize, pad: usize, k_eff: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k_eff {
        return None;
    }
    Some((padded - k_eff) / stride + 1)
}

/// im2col for a single image: writes a `(C*KH*KW) x (OH*OW)` row-major matrix.
/// Row index runs over `(c, ki, kj)`, column index over output pixels.
pub(crate) fn im2col<T: Scalar>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    p: &ConvParams,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let (dh, dw) = p.dilation;
    let pixels = oh * ow;
    debug_assert_eq!(out.len(), c_in * kh * kw * pixels);

    for c in 0..c_in {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * pixels;
                for oy in 0..oh {
                    let iy = (oy * sh + ki * dh) as isize - ph as isize;
                    let dst = &mut out[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * sw + kj * dw) as isize - pw as isize;
                        *d = if ix >= 0 && (ix as usize) < w {
                            src_row[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back into an image (adjoint of `im2col`).
pub(crate) fn col2im_add<T: Scalar>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    p: &ConvParams,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let (dh, dw) = p.dilation;
    let pixels = oh * ow;

    for c in 0..c_in {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * pixels;
                for oy in 0..oh {
                    let iy = (oy * sh + ki * dh) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * sw + kj * dw) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst_row[ix as usize] = dst_row[ix as usize] + *s;
                        }
                    }
                }
            }
        }
    }
}

/// Saved forward context reused by the backward pass: the im2col matrices of
/// the whole batch, one `(C*KH*KW) x (OH*OW)` block per image.
pub(crate) struct ConvCache<T: Scalar> {
    pub cols: Vec<T>,
    pub per_image: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: &ConvParams,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let ish = input.shape();
    let wsh = weight.shape();
    if wsh.h != p.kernel.0 || wsh.w != p.kernel.1 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("weight spatial extents {} do not match kernel {:?}", wsh, p.kernel),
        });
    }
    if ish.c != wsh.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("input channels {} != weight Cin {}", ish.c, wsh.c),
        });
    }
    let c_out = wsh.n;
    if let Some(b) = bias {
        if b.shape().count() != c_out {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias has {} values, expected {}", b.shape().count(), c_out),
            });
        }
    }
    let (oh, ow) = p.output_hw(ish.h, ish.w)?;
    let k = ish.c * p.kernel.0 * p.kernel.1;
    let pixels = oh * ow;
    let per_image = k * pixels;

    let mut cols = vec![T::zero(); ish.n * per_image];
    let mut out = Tensor::zeros(Shape::new(ish.n, c_out, oh, ow));
    let out_per_image = c_out * pixels;

    for n in 0..ish.n {
        let img = &input.data()[n * ish.c * ish.h * ish.w..(n + 1) * ish.c * ish.h * ish.w];
        let col = &mut cols[n * per_image..(n + 1) * per_image];
        im2col(img, ish.c, ish.h, ish.w, p, oh, ow, col);
        // out_n (c_out x pixels) = W (c_out x k) * col (k x pixels)
        T::gemm(
            c_out,
            k,
            pixels,
            T::one(),
            weight.data(),
            k as isize,
            1,
            col,
            pixels as isize,
            1,
            T::zero(),
            &mut out.data_mut()[n * out_per_image..(n + 1) * out_per_image],
            pixels as isize,
            1,
        );
    }

    if let Some(b) = bias {
        let bd = b.data();
        for n in 0..ish.n {
            for co in 0..c_out {
                let base = (n * c_out + co) * pixels;
                let bv = bd[co];
                for v in &mut out.data_mut()[base..base + pixels] {
                    *v = *v + bv;
                }
            }
        }
    }

    if !out.all_finite() {
        return Err(Error::NonFinite { op: "conv2d" });
    }
    Ok((out, ConvCache { cols, per_image, oh, ow }))
}

/// Gradient with respect to the input: `col_grad = W^T * dY`, then col2im.
pub(crate) fn conv2d_backward_input<T: Scalar>(
    weight: &Tensor<T>,
    grad_out: &[T],
    p: &ConvParams,
    input_shape: Shape,
    cache: &ConvCache<T>,
) -> Tensor<T> {
    let wsh = weight.shape();
    let c_out = wsh.n;
    let k = wsh.c * wsh.h * wsh.w;
    let pixels = cache.oh * cache.ow;
    let mut grad_in = Tensor::zeros(input_shape);
    let mut col_grad = vec![T::zero(); k * pixels];

    for n in 0..input_shape.n {
        let dy = &grad_out[n * c_out * pixels..(n + 1) * c_out * pixels];
        // col_grad (k x pixels) = W^T (k x c_out) * dY (c_out x pixels)
        T::gemm(
            k,
            c_out,
            pixels,
            T::one(),
            weight.data(),
            1,
            k as isize,
            dy,
            pixels as isize,
            1,
            T::zero(),
            &mut col_grad,
            pixels as isize,
            1,
        );
        let img = &mut grad_in.data_mut()
            [n * input_shape.c * input_shape.h * input_shape.w..(n + 1) * input_shape.c * input_shape.h * input_shape.w];
        col2im_add(&col_grad, input_shape.c, input_shape.h, input_shape.w, p, cache.oh, cache.ow, img);
    }
    grad_in
}

/// Gradients with respect to weight and bias, accumulated over the batch.
pub(crate) fn conv2d_backward_params<T: Scalar>(
    grad_out: &[T],
    weight_shape: Shape,
    batch: usize,
    cache: &ConvCache<T>,
    want_bias: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let c_out = weight_shape.n;
    let k = weight_shape.c * weight_shape.h * weight_shape.w;
    let pixels = cache.oh * cache.ow;
    let mut dw = vec![T::zero(); c_out * k];

    for n in 0..batch {
        let dy = &grad_out[n * c_out * pixels..(n + 1) * c_out * pixels];
        let col = &cache.cols[n * cache.per_image..(n + 1) * cache.per_image];
        // dW (c_out x k) += dY (c_out x pixels) * col^T (pixels x k)
        T::gemm(
            c_out,
            pixels,
            k,
            T::one(),
            dy,
            pixels as isize,
            1,
            col,
            1,
            pixels as isize,
            T::one(),
            &mut dw,
            k as isize,
            1,
        );
    }

    let db = want_bias.then(|| {
        let mut db = vec![T::zero(); c_out];
        for n in 0..batch {
            for co in 0..c_out {
                let base = (n * c_out + co) * pixels;
                let mut acc = T::zero();
                for v in &grad_out[base..base + pixels] {
                    acc = acc + *v;
                }
                db[co] = db[co] + acc;
            }
        }
        db
    });

    (dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: Shape) -> Tensor<f64> {
        Tensor::filled(shape, 1.0)
    }

    #[test]
    fn effective_kernel_matches_formula() {
        let p = ConvParams::new((3, 3), (1, 1), (2, 2), (2, 2));
        assert_eq!(p.effective_kernel(), (5, 5));
        let p = ConvParams::new((1, 3), (1, 1), (0, 1), (1, 1));
        assert_eq!(p.effective_kernel(), (1, 3));
    }

    #[test]
    fn output_extent_floor_rule() {
        let p = ConvParams::new((3, 3), (2, 2), (1, 1), (1, 1));
        assert_eq!(p.output_hw(8, 8).unwrap(), (4, 4));
        // 5x5 input, k_eff 7, no padding: extent would be non-positive
        let p = ConvParams::new((7, 7), (1, 1), (0, 0), (1, 1));
        assert!(p.output_hw(5, 5).is_err());
    }

    #[test]
    fn all_ones_center_value_is_nine() {
        let input = ones(Shape::new(1, 1, 5, 5));
        let weight = ones(Shape::new(1, 1, 3, 3));
        let p = ConvParams::simple(3, 1);
        let (out, _) = conv2d_forward(&input, &weight, None, &p).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 5, 5));
        assert_eq!(out.at(0, 0, 2, 2), 9.0);
        // corner only overlaps four taps
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn dilated_all_ones_center_value_is_nine() {
        let input = ones(Shape::new(1, 1, 5, 5));
        let weight = ones(Shape::new(1, 1, 3, 3));
        let p = ConvParams::new((3, 3), (1, 1), (2, 2), (2, 2));
        let (out, _) = conv2d_forward(&input, &weight, None, &p).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 5, 5));
        assert_eq!(out.at(0, 0, 2, 2), 9.0);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let input = ones(Shape::new(1, 2, 5, 5));
        let weight = ones(Shape::new(1, 1, 3, 3));
        assert!(conv2d_forward(&input, &weight, None, &ConvParams::simple(3, 1)).is_err());
    }

    #[test]
    fn bias_is_added_per_output_channel() {
        let input = ones(Shape::new(1, 1, 3, 3));
        let weight = ones(Shape::new(2, 1, 1, 1));
        let bias = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![10.0, -10.0]).unwrap();
        let p = ConvParams::simple(1, 0);
        let (out, _) = conv2d_forward(&input, &weight, Some(&bias), &p).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 11.0);
        assert_eq!(out.at(0, 1, 1, 1), -9.0);
    }
}
