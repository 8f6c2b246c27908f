use super::gemm::gemm;
use super::{Scalar, Tensor, TensorError, Var};

fn matrix_dims<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize), TensorError> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            expected: "2-d tensor".into(),
            found: format!("{:?}", t.shape()),
        }),
    }
}

fn check_labels<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(usize, usize), TensorError> {
    let (n, k) = matrix_dims(logits, "softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            expected: format!("{n} labels"),
            found: format!("{} labels", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::InvalidArgument {
            op: "softmax_cross_entropy",
            message: format!("label {bad} out of range for {k} classes"),
        });
    }
    Ok((n, k))
}

/// Row-wise softmax probabilities and the mean negative log-likelihood.
fn softmax_nll<T: Scalar>(logits: &Tensor<T>, labels: &[usize], n: usize, k: usize) -> (Vec<T>, T) {
    let mut probs = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let out = &mut probs[i * k..(i + 1) * k];
        let mut z = T::zero();
        for (p, &v) in out.iter_mut().zip(row) {
            *p = (v - max).exp();
            z += *p;
        }
        for p in out.iter_mut() {
            *p = *p / z;
        }
        loss += z.ln() + max - row[label];
    }
    (probs, loss / T::from_f64(n as f64))
}

/// Mean softmax cross-entropy of `(N, K)` logits without recording anything.
pub fn softmax_cross_entropy_value<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<T, TensorError> {
    let (n, k) = check_labels(logits, labels)?;
    Ok(softmax_nll(logits, labels, n, k).1)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()));
        self.tape().push_op(
            out,
            &[self],
            Box::new(move |dy, _| {
                let dx = x
                    .zip_map(dy, |v, g| if v > T::zero() { g } else { T::zero() })
                    .expect("same shape");
                vec![Some(dx)]
            }),
            "relu",
        )
    }

    /// `x W^T + b` for `x: (N, in)`, `W: (out, in)`, `b: (out)`.
    pub fn linear(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>, TensorError> {
        let (x, w) = (self.value(), weight.value());
        let (n, fin) = matrix_dims(&x, "linear")?;
        let (fout, win) = matrix_dims(&w, "linear")?;
        if win != fin {
            return Err(TensorError::ChannelMismatch {
                op: "linear",
                input: fin,
                kernel: win,
            });
        }
        let mut out = vec![T::zero(); n * fout];
        gemm(
            n,
            fin,
            fout,
            x.data(),
            false,
            w.data(),
            true,
            T::zero(),
            &mut out,
        );
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [fout] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    expected: format!("[{fout}]"),
                    found: format!("{:?}", bv.shape()),
                });
            }
            for row in out.chunks_mut(fout) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            parents.push(b);
        }
        let out = Tensor::new(vec![n, fout], out)?;
        let has_bias = bias.is_some();
        Ok(self.tape().push_op(
            out,
            &parents,
            Box::new(move |dy, needs| {
                let dx = needs[0].then(|| {
                    let mut d = vec![T::zero(); n * fin];
                    gemm(
                        n,
                        fout,
                        fin,
                        dy.data(),
                        false,
                        w.data(),
                        false,
                        T::zero(),
                        &mut d,
                    );
                    Tensor::new(vec![n, fin], d).expect("shape")
                });
                let dw = needs[1].then(|| {
                    let mut d = vec![T::zero(); fout * fin];
                    gemm(
                        fout,
                        n,
                        fin,
                        dy.data(),
                        true,
                        x.data(),
                        false,
                        T::zero(),
                        &mut d,
                    );
                    Tensor::new(vec![fout, fin], d).expect("shape")
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        let mut d = vec![T::zero(); fout];
                        for row in dy.data().chunks(fout) {
                            for (a, &g) in d.iter_mut().zip(row) {
                                *a += g;
                            }
                        }
                        Tensor::new(vec![fout], d).expect("shape")
                    }));
                }
                grads
            }),
            "linear",
        ))
    }

    /// Mean softmax cross-entropy over the batch; `self` holds `(N, K)` logits.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let logits = self.value();
        let (n, k) = check_labels(&logits, labels)?;
        let (probs, loss) = softmax_nll(&logits, labels, n, k);
        let labels = labels.to_vec();
        Ok(self.tape().push_op(
            Tensor::scalar(loss),
            &[self],
            Box::new(move |dy, _| {
                let scale = dy.item() / T::from_f64(n as f64);
                let mut d = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    d[i * k + label] -= T::one();
                }
                for v in &mut d {
                    *v *= scale;
                }
                vec![Some(Tensor::new(vec![n, k], d).expect("shape"))]
            }),
            "softmax_cross_entropy",
        ))
    }
}
