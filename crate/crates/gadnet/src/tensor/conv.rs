//! Convolution kernels: im2col lowering plus gemm, channels-last layout.
//!
//! Activations are (batch, height, width, channels) and weights are
//! (out_channels, ky, kx, in_channels), so patch rows are built from
//! contiguous channel runs and the gemm result is already in activation
//! layout — no transpose passes. A single gemm per layer runs over the whole
//! batch, which keeps accumulation order fixed and results bit-for-bit
//! reproducible across runs regardless of gemm threading.

use ndarray::{linalg::general_mat_mul, Array2, Array4, ArrayView2, ArrayView4, ArrayViewMut4};

use super::Scalar;

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Matrix whose every element is about to be overwritten (gemm with beta 0).
fn uninit_matrix<T: Scalar>(rows: usize, cols: usize) -> Array2<T> {
    let mut v = Vec::with_capacity(rows * cols);
    // SAFETY: T is a plain float; the caller overwrites all elements before
    // any read, and len == capacity
    unsafe { v.set_len(rows * cols) };
    Array2::from_shape_vec((rows, cols), v).unwrap()
}

/// Lower a batch into the patch matrix (b * oh * ow, k * k * cin).
pub fn im2col<T: Scalar>(
    x: &ArrayView4<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (b, h, w, cin) = x.dim();
    let oh = conv_out_size(h, kernel, stride, pad);
    let ow = conv_out_size(w, kernel, stride, pad);
    let row_len = kernel * kernel * cin;
    let mut out = Array2::<T>::zeros((b * oh * ow, row_len));
    im2col_into(x, kernel, stride, pad, &mut out.view_mut());
    out
}

/// Fill a pre-zeroed patch matrix slice for this view's batch.
fn im2col_into<T: Scalar>(
    x: &ArrayView4<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    out: &mut ndarray::ArrayViewMut2<T>,
) {
    let (b, h, w, cin) = x.dim();
    let oh = conv_out_size(h, kernel, stride, pad);
    let ow = conv_out_size(w, kernel, stride, pad);
    let row_len = kernel * kernel * cin;
    debug_assert_eq!(out.dim(), (b * oh * ow, row_len));
    {
        let xs = x.as_slice().expect("conv input must be standard layout");
        let os = out.as_slice_mut().unwrap();
        let seg = kernel * cin;
        for bi in 0..b {
            let xoff = bi * h * w * cin;
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let row = ((bi * oh + oy) * ow + ox) * row_len;
                    let x_lo = ix0.max(0) as usize;
                    let x_hi = ((ix0 + kernel as isize).min(w as isize)) as usize;
                    if x_hi <= x_lo {
                        continue;
                    }
                    let run = (x_hi - x_lo) * cin;
                    let kx0 = (x_lo as isize - ix0) as usize;
                    for ky in 0..kernel {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = xoff + (iy as usize * w + x_lo) * cin;
                        let dst = row + (ky * kernel + kx0) * cin;
                        // one contiguous channel run per kernel row
                        unsafe {
                            std::ptr::copy_nonoverlapping(
                                xs.as_ptr().add(src),
                                os.as_mut_ptr().add(dst),
                                run,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto the input gradient.
pub fn col2im_acc<T: Scalar>(
    cols: &ArrayView2<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    gx: &mut ArrayViewMut4<T>,
) {
    let (b, h, w, cin) = gx.dim();
    let oh = conv_out_size(h, kernel, stride, pad);
    let ow = conv_out_size(w, kernel, stride, pad);
    let row_len = kernel * kernel * cin;
    let cs = cols.as_slice().expect("col gradient must be standard layout");
    let gs = gx.as_slice_mut().expect("input gradient must be standard layout");
    for bi in 0..b {
        let xoff = bi * h * w * cin;
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = ((bi * oh + oy) * ow + ox) * row_len;
                let x_lo = ix0.max(0) as usize;
                let x_hi = ((ix0 + kernel as isize).min(w as isize)) as usize;
                if x_hi <= x_lo {
                    continue;
                }
                let run = (x_hi - x_lo) * cin;
                let kx0 = (x_lo as isize - ix0) as usize;
                for ky in 0..kernel {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = xoff + (iy as usize * w + x_lo) * cin;
                    let src = row + (ky * kernel + kx0) * cin;
                    // contiguous accumulate; bounds established above
                    unsafe {
                        for i in 0..run {
                            let g = gs.get_unchecked_mut(dst + i);
                            *g = *g + *cs.get_unchecked(src + i);
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the output and, when requested, the patch
/// matrix for reuse in the weight-gradient gemm.
pub fn conv2d_forward<T: Scalar>(
    x: &ArrayView4<T>,
    weight: &ArrayView4<T>,
    bias: &[T],
    stride: usize,
    pad: usize,
    keep_patches: bool,
) -> (Array4<T>, Option<Array2<T>>) {
    let (b, h, w, cin) = x.dim();
    let (cout, k, k2, wcin) = weight.dim();
    assert_eq!(cin, wcin, "conv channel mismatch");
    assert_eq!(k, k2, "conv kernels are square");
    assert_eq!(bias.len(), cout);
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let m = b * oh * ow;
    let kk = k * k * cin;
    let wmat = weight
        .to_shape((cout, kk))
        .expect("weight must be standard layout");

    let patches = im2col(x, k, stride, pad);
    // (M, K) x (K, cout): the result is already channels-last; the gemm
    // (beta = 0) overwrites every element, so skip the zero fill
    let mut flat = uninit_matrix::<T>(m, cout);
    general_mat_mul(T::one(), &patches, &wmat.t(), T::zero(), &mut flat);
    {
        let fs = flat.as_slice_mut().unwrap();
        for p in 0..m {
            let off = p * cout;
            for (c, &bc) in bias.iter().enumerate() {
                // in bounds: off + c < m * cout
                unsafe {
                    let v = fs.get_unchecked_mut(off + c);
                    *v = *v + bc;
                }
            }
        }
    }
    let out = flat
        .into_shape_with_order((b, oh, ow, cout))
        .expect("conv output reshape");
    (out, keep_patches.then_some(patches))
}

pub struct ConvGrads<T> {
    pub gx: Option<Array4<T>>,
    pub gw: Option<Array4<T>>,
    pub gb: Option<Vec<T>>,
}

/// Backward convolution. Any of the three gradients may be skipped; the
/// patch matrix is required only for the weight gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    gout: &ArrayView4<T>,
    weight: &ArrayView4<T>,
    patches: Option<&Array2<T>>,
    x_dim: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
    need_gb: bool,
) -> ConvGrads<T> {
    let (b, oh, ow, cout) = gout.dim();
    let (wcout, k, _, cin) = weight.dim();
    assert_eq!(cout, wcout);
    let m = b * oh * ow;
    let kk = k * k * cin;

    // channels-last gradient is already the (M, cout) matrix
    let gflat = gout
        .to_shape((m, cout))
        .expect("grad must be standard layout");

    let gb = need_gb.then(|| {
        let mut acc = vec![T::zero(); cout];
        let gs = gflat.as_slice().unwrap();
        for p in 0..m {
            let off = p * cout;
            for (c, a) in acc.iter_mut().enumerate() {
                unsafe {
                    *a = *a + *gs.get_unchecked(off + c);
                }
            }
        }
        acc
    });

    let gw = if need_gw {
        let patches = patches.expect("weight gradient requires cached patches");
        let mut gwmat = uninit_matrix::<T>(cout, kk);
        general_mat_mul(T::one(), &gflat.t(), patches, T::zero(), &mut gwmat);
        Some(
            gwmat
                .into_shape_with_order((cout, k, k, cin))
                .expect("weight gradient reshape"),
        )
    } else {
        None
    };

    let gx = if need_gx {
        let wmat = weight.to_shape((cout, kk)).expect("weight layout");
        let mut gpatches = uninit_matrix::<T>(m, kk);
        general_mat_mul(T::one(), &gflat, &wmat, T::zero(), &mut gpatches);
        let mut gx = Array4::<T>::zeros(x_dim);
        col2im_acc(&gpatches.view(), k, stride, pad, &mut gx.view_mut());
        Some(gx)
    } else {
        None
    };

    ConvGrads { gx, gw, gb }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use ndarray::Array4;

    /// Direct quadruple-loop convolution in f64, the independent reference.
    fn conv_reference(
        x: &Array4<f64>,
        w: &Array4<f64>,
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (b, h, wd, cin) = x.dim();
        let (cout, k, _, _) = w.dim();
        let oh = conv_out_size(h, k, stride, pad);
        let ow = conv_out_size(wd, k, stride, pad);
        let mut out = Array4::<f64>::zeros((b, oh, ow, cout));
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[(bi, iy as usize, ix as usize, ci)]
                                        * w[(co, ky, kx, ci)];
                                }
                            }
                        }
                        out[(bi, oy, ox, co)] = acc;
                    }
                }
            }
        }
        out
    }

    fn random4(s: &mut Stream, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut a = Array4::<f64>::zeros(dim);
        for v in a.iter_mut() {
            *v = s.normal();
        }
        a
    }

    #[test]
    fn forward_matches_reference() {
        let mut s = Stream::new(5, "conv-oracle");
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (2, 0, 1)] {
            let x = random4(&mut s, (2, 8, 8, 3));
            let w = random4(&mut s, (4, k, k, 3));
            let bias: Vec<f64> = (0..4).map(|_| s.normal()).collect();
            let (got, _) = conv2d_forward(&x.view(), &w.view(), &bias, stride, pad, false);
            let want = conv_reference(&x, &w, &bias, stride, pad);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b} (stride {stride} k {k})");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut s = Stream::new(9, "conv-fd");
        let x = random4(&mut s, (2, 6, 6, 2));
        let w = random4(&mut s, (3, 3, 3, 2));
        let bias: Vec<f64> = (0..3).map(|_| s.normal()).collect();
        let stride = 2;
        let pad = 1;

        // loss = sum of outputs, so every gradient is a plain sensitivity
        let loss = |x: &Array4<f64>, w: &Array4<f64>, bias: &[f64]| -> f64 {
            conv2d_forward(&x.view(), &w.view(), bias, stride, pad, false)
                .0
                .sum()
        };

        let (out, patches) = conv2d_forward(&x.view(), &w.view(), &bias, stride, pad, true);
        let gout = Array4::<f64>::ones(out.dim());
        let grads = conv2d_backward(
            &gout.view(),
            &w.view(),
            patches.as_ref(),
            x.dim(),
            stride,
            pad,
            true,
            true,
            true,
        );

        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 3, 2, 1), (0, 5, 5, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp, &w, &bias) - loss(&xm, &w, &bias)) / (2.0 * h);
            let an = grads.gx.as_ref().unwrap()[idx];
            assert!((fd - an).abs() < 1e-5, "gx {fd} vs {an}");
        }
        for idx in [(0, 0, 0, 0), (2, 2, 2, 1), (1, 1, 1, 0)] {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let fd = (loss(&x, &wp, &bias) - loss(&x, &wm, &bias)) / (2.0 * h);
            let an = grads.gw.as_ref().unwrap()[idx];
            assert!((fd - an).abs() < 1e-5, "gw {fd} vs {an}");
        }
        let mut bp = bias.clone();
        bp[1] += h;
        let mut bm = bias.clone();
        bm[1] -= h;
        let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
        assert!((fd - grads.gb.as_ref().unwrap()[1]).abs() < 1e-5);
    }
}
