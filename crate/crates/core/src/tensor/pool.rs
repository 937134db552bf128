//! Max and average pooling over a dilated tap grid.
//!
//! Padding is valued 0 for average pooling and -inf for max pooling. Average
//! pooling divides by the full kernel size (padding taps count), so gradient
//! per in-bounds tap is `g / (kh*kw)`. Max pooling records the argmax of each
//! window; ties resolve to the earliest tap in `(ki, kj)` scan order.

use super::{ConvParams, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

pub(crate) struct PoolCache {
    /// For max pooling: flat input index of the winning tap per output
    /// element, `usize::MAX` when the window was entirely padding.
    pub argmax: Vec<usize>,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn pool2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kind: PoolKind,
    p: &ConvParams,
) -> Result<(Tensor<T>, PoolCache)> {
    let ish = input.shape();
    let (oh, ow) = p.output_hw(ish.h, ish.w)?;
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let (dh, dw) = p.dilation;

    let mut out = Tensor::zeros(Shape::new(ish.n, ish.c, oh, ow));
    let mut argmax = if kind == PoolKind::Max {
        vec![usize::MAX; out.shape().count()]
    } else {
        Vec::new()
    };
    let window = T::from_f64((kh * kw) as f64);

    let data = input.data();
    for n in 0..ish.n {
        for c in 0..ish.c {
            let plane_base = (n * ish.c + c) * ish.h * ish.w;
            let plane = &data[plane_base..plane_base + ish.h * ish.w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    let mut acc = T::zero();
                    for ki in 0..kh {
                        let iy = (oy * sh + ki * dh) as isize - ph as isize;
                        if iy < 0 || iy >= ish.h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let ix = (ox * sw + kj * dw) as isize - pw as isize;
                            if ix < 0 || ix >= ish.w as isize {
                                continue;
                            }
                            let idx = iy as usize * ish.w + ix as usize;
                            let v = plane[idx];
                            match kind {
                                PoolKind::Max => {
                                    if v > best {
                                        best = v;
                                        best_idx = plane_base + idx;
                                    }
                                }
                                PoolKind::Avg => acc = acc + v,
                            }
                        }
                    }
                    let o = out.shape().offset(n, c, oy, ox);
                    match kind {
                        PoolKind::Max => {
                            out.data_mut()[o] = best;
                            argmax[o] = best_idx;
                        }
                        PoolKind::Avg => out.data_mut()[o] = acc / window,
                    }
                }
            }
        }
    }

    if !out.all_finite() {
        // A max window entirely inside the padding yields -inf.
        return Err(Error::NonFinite { op: "pool2d" });
    }
    Ok((out, PoolCache { argmax, oh, ow }))
}

pub(crate) fn pool2d_backward<T: Scalar>(
    input_shape: Shape,
    kind: PoolKind,
    p: &ConvParams,
    cache: &PoolCache,
    grad_out: &[T],
) -> Tensor<T> {
    let mut grad_in = Tensor::zeros(input_shape);
    match kind {
        PoolKind::Max => {
            let g = grad_in.data_mut();
            for (o, &idx) in cache.argmax.iter().enumerate() {
                if idx != usize::MAX {
                    g[idx] = g[idx] + grad_out[o];
                }
            }
        }
        PoolKind::Avg => {
            let (kh, kw) = p.kernel;
            let (sh, sw) = p.stride;
            let (ph, pw) = p.padding;
            let (dh, dw) = p.dilation;
            let share = T::one() / T::from_f64((kh * kw) as f64);
            let (oh, ow) = (cache.oh, cache.ow);
            let g = grad_in.data_mut();
            for n in 0..input_shape.n {
                for c in 0..input_shape.c {
                    let plane_base = (n * input_shape.c + c) * input_shape.h * input_shape.w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = grad_out[((n * input_shape.c + c) * oh + oy) * ow + ox] * share;
                            for ki in 0..kh {
                                let iy = (oy * sh + ki * dh) as isize - ph as isize;
                                if iy < 0 || iy >= input_shape.h as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let ix = (ox * sw + kj * dw) as isize - pw as isize;
                                    if ix < 0 || ix >= input_shape.w as isize {
                                        continue;
                                    }
                                    let idx = plane_base + iy as usize * input_shape.w + ix as usize;
                                    g[idx] = g[idx] + go;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor<f64> {
        // 3x3 plane holding 1..9 row-major
        Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, h, w| (h * 3 + w + 1) as f64)
    }

    #[test]
    fn max_of_full_window_is_nine() {
        let p = ConvParams::simple(3, 0);
        let (out, _) = pool2d_forward(&ramp(), PoolKind::Max, &p).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(out.item(), 9.0);
    }

    #[test]
    fn avg_of_full_window_is_five() {
        let p = ConvParams::simple(3, 0);
        let (out, _) = pool2d_forward(&ramp(), PoolKind::Avg, &p).unwrap();
        assert_eq!(out.item(), 5.0);
    }

    #[test]
    fn avg_padding_counts_toward_divisor() {
        let one = Tensor::<f64>::filled(Shape::new(1, 1, 1, 1), 9.0);
        let p = ConvParams::simple(3, 1);
        let (out, _) = pool2d_forward(&one, PoolKind::Avg, &p).unwrap();
        assert_eq!(out.at(0, 0, 0, 0), 1.0);
    }

    #[test]
    fn max_window_entirely_in_padding_is_an_error() {
        let one = Tensor::<f64>::filled(Shape::new(1, 1, 1, 1), 1.0);
        // k_eff = 3, pad 3: the corner windows never touch the input
        let p = ConvParams::new((3, 3), (1, 1), (3, 3), (1, 1));
        assert!(pool2d_forward(&one, PoolKind::Max, &p).is_err());
    }

    #[test]
    fn dilated_max_matches_enumeration() {
        let input = Tensor::<f64>::from_fn(Shape::new(1, 1, 5, 5), |_, _, h, w| (h * 5 + w) as f64);
        let p = ConvParams::new((3, 3), (1, 1), (2, 2), (2, 2));
        let (out, _) = pool2d_forward(&input, PoolKind::Max, &p).unwrap();
        // brute-force re-enumeration of each window
        for oy in 0..5usize {
            for ox in 0..5usize {
                let mut best = f64::NEG_INFINITY;
                for ki in 0..3usize {
                    for kj in 0..3usize {
                        let iy = oy as isize + ki as isize * 2 - 2;
                        let ix = ox as isize + kj as isize * 2 - 2;
                        if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                            best = best.max(input.at(0, 0, iy as usize, ix as usize));
                        }
                    }
                }
                assert_eq!(out.at(0, 0, oy, ox), best);
            }
        }
    }
}
