use super::gemm::gemm;
use super::{output_extent, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn new<T: Scalar>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let (n, c, h, w) = input.dims4("conv2d")?;
        let (o, i, kh, kw) = kernel.dims4("conv2d")?;
        if i != c {
            return Err(TensorError::ChannelMismatch {
                op: "conv2d",
                input: c,
                kernel: i,
            });
        }
        let extent = |size, k| {
            output_extent(size, k, stride, padding).ok_or(TensorError::InvalidExtent {
                op: "conv2d",
                extent: size,
                kernel: k,
                stride,
                padding,
            })
        };
        let oh = extent(h, kh)?;
        let ow = extent(w, kw)?;
        Ok(Geometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output positions `lo..hi` along one axis whose tap `k` lands inside the input.
fn valid_range(out: usize, k: usize, size: usize, stride: usize, padding: usize) -> (usize, usize) {
    // need 0 <= o * stride + k - padding < size
    let lo = padding.saturating_sub(k).div_ceil(stride);
    let hi = if size + padding > k {
        ((size + padding - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Gathers one image into a `(C*Kh*Kw) x (OH*OW)` patch matrix.
fn im2col<T: Scalar>(g: &Geometry, image: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for ch in 0..g.c {
        let src = &image[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, ky, g.h, g.stride, g.padding);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.ow, kx, g.w, g.stride, g.padding);
                let row = ((ch * g.kh + ky) * g.kw + kx) * plane;
                let dst = &mut cols[row..row + plane];
                dst[..ylo * g.ow].fill(T::zero());
                dst[yhi * g.ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.padding;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    if xlo == xhi {
                        continue;
                    }
                    let ix0 = xlo * g.stride + kx - g.padding;
                    let src_row = &src[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        line[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for (j, v) in line[xlo..xhi].iter_mut().enumerate() {
                            *v = src_row[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto one image.
fn col2im<T: Scalar>(g: &Geometry, cols: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    for ch in 0..g.c {
        let dst = &mut image[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, ky, g.h, g.stride, g.padding);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.ow, kx, g.w, g.stride, g.padding);
                if xlo == xhi {
                    continue;
                }
                let row = ((ch * g.kh + ky) * g.kw + kx) * plane;
                let src = &cols[row..row + plane];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.padding;
                    let ix0 = xlo * g.stride + kx - g.padding;
                    let line = &src[oy * g.ow + xlo..oy * g.ow + xhi];
                    let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        for (d, &v) in dst_row[ix0..ix0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            dst_row[ix0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Scalar>(g: &Geometry, input: &Tensor<T>, kernel: &Tensor<T>) -> Tensor<T> {
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.o * plane];
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * plane]
    };
    let in_img = g.c * g.h * g.w;
    for b in 0..g.n {
        let image = &input.data()[b * in_img..(b + 1) * in_img];
        let rhs: &[T] = if g.pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        let dst = &mut out[b * g.o * plane..(b + 1) * g.o * plane];
        gemm(
            g.o,
            g.patch(),
            plane,
            kernel.data(),
            false,
            rhs,
            false,
            T::zero(),
            dst,
        );
    }
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out).expect("conv output shape")
}

/// 2-d cross-correlation of an NCHW input with an OIHW kernel, no bias.
///
/// The output extent is `floor((H + 2p - K) / stride) + 1`; an error is
/// returned when the window does not fit at all.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let g = Geometry::new(input, kernel, stride, padding)?;
    Ok(forward(&g, input, kernel))
}

/// Gradients of [`conv2d`] with respect to the input and the kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let g = Geometry::new(input, kernel, stride, padding)?;
    let expected = [g.n, g.o, g.oh, g.ow];
    if grad_out.shape() != expected {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            expected: format!("{expected:?}"),
            found: format!("{:?}", grad_out.shape()),
        });
    }
    let (gi, gk) = backward(&g, input, kernel, grad_out, true, true);
    Ok((gi.expect("requested"), gk.expect("requested")))
}

fn backward<T: Scalar>(
    g: &Geometry,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let plane = g.out_plane();
    let patch = g.patch();
    let in_img = g.c * g.h * g.w;
    let mut gk = want_kernel.then(|| vec![T::zero(); g.o * patch]);
    let mut gi = want_input.then(|| vec![T::zero(); g.n * in_img]);
    let mut cols = vec![T::zero(); if g.pointwise() { 0 } else { patch * plane }];
    for b in 0..g.n {
        let dy = &grad_out.data()[b * g.o * plane..(b + 1) * g.o * plane];
        let image = &input.data()[b * in_img..(b + 1) * in_img];
        if let Some(gk) = gk.as_mut() {
            let rhs: &[T] = if g.pointwise() {
                image
            } else {
                im2col(g, image, &mut cols);
                &cols
            };
            gemm(g.o, plane, patch, dy, false, rhs, true, T::one(), gk);
        }
        if let Some(gi) = gi.as_mut() {
            let dst = &mut gi[b * in_img..(b + 1) * in_img];
            if g.pointwise() {
                gemm(
                    patch,
                    g.o,
                    plane,
                    kernel.data(),
                    true,
                    dy,
                    false,
                    T::zero(),
                    dst,
                );
            } else {
                gemm(
                    patch,
                    g.o,
                    plane,
                    kernel.data(),
                    true,
                    dy,
                    false,
                    T::zero(),
                    &mut cols,
                );
                col2im(g, &cols, dst);
            }
        }
    }
    (
        gi.map(|d| Tensor::new(input.shape().to_vec(), d).expect("input shape")),
        gk.map(|d| Tensor::new(kernel.shape().to_vec(), d).expect("kernel shape")),
    )
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Differentiable [`conv2d`]; `self` is the input, `kernel` the weights.
    pub fn conv2d(
        self,
        kernel: Var<'t, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>, TensorError> {
        let (x, w) = (self.value(), kernel.value());
        let g = Geometry::new(&x, &w, stride, padding)?;
        let out = forward(&g, &x, &w);
        Ok(self.tape().push_op(
            out,
            &[self, kernel],
            Box::new(move |dy, needs| {
                let (gi, gk) = backward(&g, &x, &w, dy, needs[0], needs[1]);
                vec![gi, gk]
            }),
            "conv2d",
        ))
    }
}
