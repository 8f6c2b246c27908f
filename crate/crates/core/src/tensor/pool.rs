use super::{output_extent, Scalar, Tensor, TensorError, Var};

fn extent(
    op: &'static str,
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    output_extent(size, kernel, stride, padding).ok_or(TensorError::InvalidExtent {
        op,
        extent: size,
        kernel,
        stride,
        padding,
    })
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Average over non-overlapping or strided `kernel x kernel` windows, no padding.
    pub fn avg_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("avg_pool2d")?;
        let oh = extent("avg_pool2d", h, kernel, stride, 0)?;
        let ow = extent("avg_pool2d", w, kernel, stride, 0)?;
        let inv = T::one() / T::from_f64((kernel * kernel) as f64);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for m in 0..n * c {
            let src = &x.data()[m * h * w..(m + 1) * h * w];
            let dst = &mut out.data_mut()[m * oh * ow..(m + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = T::zero();
                    for ky in 0..kernel {
                        let row = (oy * stride + ky) * w + ox * stride;
                        s += src[row..row + kernel].iter().copied().sum();
                    }
                    dst[oy * ow + ox] = s * inv;
                }
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape().push_op(
            out,
            &[self],
            Box::new(move |dy, _| {
                let mut dx = Tensor::zeros(&shape);
                for m in 0..n * c {
                    let src = &dy.data()[m * oh * ow..(m + 1) * oh * ow];
                    let dst = &mut dx.data_mut()[m * h * w..(m + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = src[oy * ow + ox] * inv;
                            for ky in 0..kernel {
                                let row = (oy * stride + ky) * w + ox * stride;
                                for v in &mut dst[row..row + kernel] {
                                    *v += g;
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
            "avg_pool2d",
        ))
    }

    /// Max over `kernel x kernel` windows; padded positions never win.
    pub fn max_pool2d(
        self,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("max_pool2d")?;
        if padding * 2 > kernel {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2d",
                message: format!("padding {padding} exceeds half the kernel {kernel}"),
            });
        }
        let oh = extent("max_pool2d", h, kernel, stride, padding)?;
        let ow = extent("max_pool2d", w, kernel, stride, padding)?;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        for m in 0..n * c {
            let src = &x.data()[m * h * w..(m + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (T::neg_infinity(), 0);
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let at = iy as usize * w + ix as usize;
                            if src[at] > best.0 {
                                best = (src[at], at);
                            }
                        }
                    }
                    let o = (m * oh + oy) * ow + ox;
                    out.data_mut()[o] = best.0;
                    argmax[o] = m * h * w + best.1;
                }
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape().push_op(
            out,
            &[self],
            Box::new(move |dy, _| {
                let mut dx = Tensor::zeros(&shape);
                for (&at, &g) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[at] += g;
                }
                vec![Some(dx)]
            }),
            "max_pool2d",
        ))
    }

    /// Spatial mean per channel: `(N, C, H, W)` to `(N, C)`.
    pub fn global_avg_pool(self) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("global_avg_pool")?;
        let plane = h * w;
        let inv = T::one() / T::from_f64(plane as f64);
        let out = Tensor::from_fn(&[n, c], |m| {
            x.data()[m * plane..(m + 1) * plane]
                .iter()
                .copied()
                .sum::<T>()
                * inv
        });
        let shape = x.shape().to_vec();
        Ok(self.tape().push_op(
            out,
            &[self],
            Box::new(move |dy, _| {
                let dx = Tensor::from_fn(&shape, |i| dy.data()[i / plane] * inv);
                vec![Some(dx)]
            }),
            "global_avg_pool",
        ))
    }
}
