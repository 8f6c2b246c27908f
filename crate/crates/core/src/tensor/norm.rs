use super::{Mode, Scalar, Tensor, TensorError, Var};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the old running value in each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel running mean and variance used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    /// Number of train-mode updates applied so far.
    pub updates: u64,
}

/// Statistics of one train-mode batch; `var` is the unbiased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BatchStats<T>) {
        let m = T::from_f64(self.momentum);
        let rest = T::one() - m;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = m * *r + rest * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(&batch.var) {
            *r = m * *r + rest * b;
        }
        self.updates += 1;
    }
}

/// Learned affine parameters plus running statistics of one BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            stats: RunningStats::new(channels),
        }
    }
}

fn check_channels<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<usize, TensorError> {
    let (_, c, _, _) = x.dims4("batch_norm")?;
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(TensorError::ChannelMismatch {
                op: "batch_norm",
                input: c,
                kernel: p.len(),
            });
        }
    }
    Ok(c)
}

/// Per-channel mean and biased variance over N, H and W.
fn moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>, usize) {
    let (n, c, h, w) = x.dims4("batch_norm").expect("checked");
    let plane = h * w;
    let count = n * plane;
    let inv = T::one() / T::from_f64(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            s += x.data()[base..base + plane].iter().copied().sum();
        }
        let mu = s * inv;
        let mut v = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for &val in &x.data()[base..base + plane] {
                v += (val - mu) * (val - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v * inv;
    }
    (mean, var, count)
}

fn unbiased<T: Scalar>(var: &[T], count: usize) -> Vec<T> {
    let factor = if count > 1 {
        T::from_f64(count as f64 / (count - 1) as f64)
    } else {
        T::one()
    };
    var.iter().map(|&v| v * factor).collect()
}

/// `y = gamma * (x - mean) * inv_std + beta`, per channel.
fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4("batch_norm").expect("checked");
    let plane = h * w;
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            let base = (b * c + ch) * plane;
            for v in &mut out.data_mut()[base..base + plane] {
                *v = *v * scale + shift;
            }
        }
    }
    out
}

fn inv_std<T: Scalar>(var: &[T], eps: f64) -> Vec<T> {
    let eps = T::from_f64(eps);
    var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
}

fn warn_uninitialized<T: Scalar>(stats: &RunningStats<T>) {
    if stats.updates == 0 {
        log::debug!("batch norm in eval mode before any train step; using mean 0, variance 1");
    }
}

/// Non-differentiable batch norm. Train mode normalizes with the batch
/// statistics and folds them into the running statistics.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Tensor<T>, TensorError> {
    check_channels(input, &state.gamma, &state.beta)?;
    match mode {
        Mode::Train => {
            let (mean, var, count) = moments(input);
            let istd = inv_std(&var, state.stats.eps);
            let out = normalize(input, &mean, &istd, state.gamma.data(), state.beta.data());
            state.stats.update(&BatchStats {
                mean,
                var: unbiased(&var, count),
            });
            Ok(out)
        }
        Mode::Eval => {
            warn_uninitialized(&state.stats);
            let istd = inv_std(state.stats.var.data(), state.stats.eps);
            Ok(normalize(
                input,
                state.stats.mean.data(),
                &istd,
                state.gamma.data(),
                state.beta.data(),
            ))
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Differentiable batch norm. In train mode the gradient includes the
    /// dependence of the batch statistics on the input, and the batch
    /// statistics are returned for the caller to fold into `stats`.
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        stats: &RunningStats<T>,
        mode: Mode,
    ) -> Result<(Var<'t, T>, Option<BatchStats<T>>), TensorError> {
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        check_channels(&x, &g, &b)?;
        let (n, c, h, w) = x.dims4("batch_norm")?;
        let plane = h * w;
        let (mean, istd, batch, train) = match mode {
            Mode::Train => {
                let (mean, var, count) = moments(&x);
                let istd = inv_std(&var, stats.eps);
                let batch = BatchStats {
                    mean: mean.clone(),
                    var: unbiased(&var, count),
                };
                (mean, istd, Some(batch), true)
            }
            Mode::Eval => {
                warn_uninitialized(stats);
                let istd = inv_std(stats.var.data(), stats.eps);
                (stats.mean.data().to_vec(), istd, None, false)
            }
        };
        let out = normalize(&x, &mean, &istd, g.data(), b.data());
        let backward = Box::new(move |dy: &Tensor<T>, needs: &[bool]| {
            let count = T::from_f64((n * plane) as f64);
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for bi in 0..n {
                for ch in 0..c {
                    let base = (bi * c + ch) * plane;
                    let xs = &x.data()[base..base + plane];
                    let ds = &dy.data()[base..base + plane];
                    for (&xv, &d) in xs.iter().zip(ds) {
                        sum_dy[ch] += d;
                        sum_dy_xhat[ch] += d * (xv - mean[ch]) * istd[ch];
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = Tensor::zeros(x.shape());
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        let k = g.data()[ch] * istd[ch];
                        let xs = &x.data()[base..base + plane];
                        let ds = &dy.data()[base..base + plane];
                        let out = &mut dx.data_mut()[base..base + plane];
                        for ((o, &xv), &d) in out.iter_mut().zip(xs).zip(ds) {
                            *o = if train {
                                let xhat = (xv - mean[ch]) * istd[ch];
                                k * (d - (sum_dy[ch] + xhat * sum_dy_xhat[ch]) / count)
                            } else {
                                k * d
                            };
                        }
                    }
                }
                dx
            });
            let dgamma = needs[1].then(|| Tensor::new(vec![c], sum_dy_xhat.clone()).expect("c"));
            let dbeta = needs[2].then(|| Tensor::new(vec![c], sum_dy.clone()).expect("c"));
            vec![dx, dgamma, dbeta]
        });
        let y = self
            .tape()
            .push_op(out, &[self, gamma, beta], backward, "batch_norm");
        Ok((y, batch))
    }
}
