//! Direct sliding-window convolution on channels-first maps. Slow and
//! simple; used as the reference for the faster paths.

use crate::error::{dim_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `input` is `[c_in, h, w]`, `kernel` is `[kh, kw, c_in, c_out]`; returns
/// `[c_out, h', w']` with `h' = (h + 2 pad - kh) / stride + 1`.
pub fn conv2d_direct<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (si, sk) = (input.shape(), kernel.shape());
    if si.len() != 3 || sk.len() != 4 || si[0] != sk[2] {
        return shape_err("conv2d_direct", si, sk);
    }
    if stride == 0 {
        return dim_err("conv2d_direct", "stride must be at least 1");
    }
    let (c_in, h, w) = (si[0], si[1], si[2]);
    let (kh, kw, c_out) = (sk[0], sk[1], sk[3]);
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return dim_err(
            "conv2d_direct",
            format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
        );
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    for o in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = T::zero();
                for i in 0..kh {
                    for j in 0..kw {
                        let iy = (y * stride + i) as isize - pad as isize;
                        let ix = (x * stride + j) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for c in 0..c_in {
                            acc += input.at(&[c, iy as usize, ix as usize]) * kernel.at(&[i, j, c, o]);
                        }
                    }
                }
                out.set(&[o, y, x], acc);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_channel_mix() {
        let x = Tensor::from_fn(&[2, 3, 3], |i| i as f64);
        let mut k = Tensor::zeros(&[1, 1, 2, 2]);
        k.set(&[0, 0, 0, 0], 1.0);
        k.set(&[0, 0, 1, 1], 1.0);
        assert_eq!(conv2d_direct(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn box_filter_interior() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64);
        let k = Tensor::ones(&[3, 3, 1, 1]);
        let y = conv2d_direct(&x, &k, 1, 1).unwrap();
        assert_eq!(y.at(&[0, 1, 1]), 36.0);
    }

    #[test]
    fn oversized_kernel_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[5, 5, 1, 1]);
        assert!(conv2d_direct(&x, &k, 1, 1).is_err());
    }
}
