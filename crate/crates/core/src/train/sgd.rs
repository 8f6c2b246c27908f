use indexmap::IndexMap;

use crate::model::Network;
use crate::tensor::{Scalar, Tensor};

/// Whether a parameter belongs to a batch-norm layer.
pub fn is_bn_param(name: &str) -> bool {
    name.ends_with(".gamma") || name.ends_with(".beta")
}

/// SGD with (optionally Nesterov) momentum and L2 weight decay folded into
/// the gradient:
///
/// ```text
/// g = grad + decay * w
/// v = momentum * v + g
/// w -= lr * (g + momentum * v)    // Nesterov
/// w -= lr * v                     // classical
/// ```
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Apply weight decay to batch-norm scale and shift as well.
    pub decay_bn: bool,
    velocity: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, nesterov: bool, weight_decay: f64, decay_bn: bool) -> Self {
        Sgd {
            momentum,
            nesterov,
            weight_decay,
            decay_bn,
            velocity: IndexMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    /// Updates every parameter of `net` that has a gradient in `grads`.
    pub fn step(&mut self, net: &mut Network<T>, grads: &IndexMap<String, Tensor<T>>, lr: f64) {
        for (name, w) in net.params_mut() {
            if let Some(grad) = grads.get(name) {
                self.update(name, w, grad, lr);
            }
        }
    }

    /// Updates one named tensor in place.
    pub fn update(&mut self, name: &str, w: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) {
        let lr = T::from_f64(lr);
        let mu = T::from_f64(self.momentum);
        let decay = if self.decay_bn || !is_bn_param(name) {
            T::from_f64(self.weight_decay)
        } else {
            T::zero()
        };
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(w.shape()));
        for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
            let g = gi + decay * *wi;
            *vi = mu * *vi + g;
            let update = if self.nesterov { g + mu * *vi } else { *vi };
            *wi -= lr * update;
        }
    }
}
