//! Direct loop implementations used as test oracles.

use super::{output_extent, Scalar, Tensor, TensorError};

/// Six nested loops over batch, output channel, output pixel, input channel
/// and kernel taps.
pub fn conv2d_naive<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = input.dims4("conv2d_naive")?;
    let (o, i, kh, kw) = kernel.dims4("conv2d_naive")?;
    if i != c {
        return Err(TensorError::ChannelMismatch {
            op: "conv2d_naive",
            input: c,
            kernel: i,
        });
    }
    let bad = |extent, k| TensorError::InvalidExtent {
        op: "conv2d_naive",
        extent,
        kernel: k,
        stride,
        padding,
    };
    let oh = output_extent(h, kh, stride, padding).ok_or(bad(h, kh))?;
    let ow = output_extent(w, kw, stride, padding).ok_or(bad(w, kw))?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = k[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out)
}
