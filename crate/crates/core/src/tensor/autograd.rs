use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{Scalar, Tensor, TensorError};

/// Computes input gradients from the output gradient. The flag slice says
/// which parents need one; entries for the others may be `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape is single-threaded; build one per forward pass and drop it after
/// the backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    first_non_finite: Cell<Option<(usize, &'static str)>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            first_non_finite: Cell::new(None),
        }
    }

    /// Registers an input. Gradients are reported for leaves with
    /// `requires_grad` set.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Rc::new(value), Vec::new(), requires_grad, None, "leaf")
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First op that produced a NaN or infinity (checked in debug builds).
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite.get()
    }

    pub(crate) fn push_op(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
        op: &'static str,
    ) -> Var<'_, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward = requires_grad.then_some(backward);
        self.push(Rc::new(value), ids, requires_grad, backward, op)
    }

    fn push(
        &self,
        value: Rc<Tensor<T>>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
        op: &'static str,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if cfg!(debug_assertions) && self.first_non_finite.get().is_none() && !value.is_finite() {
            log::warn!("non-finite output from {op} (tape node {id})");
            self.first_non_finite.set(Some((id, op)));
        }
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&parent, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.accumulate(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // keep leaf gradients only
        for (id, node) in nodes.iter().enumerate() {
            if node.backward.is_some() || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }

    /// Sum of all elements.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push_op(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
            "sum",
        )
    }

    /// `sum(self * weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(self, weights: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        x.expect_same_shape(weights, "weighted_sum")?;
        let total = x
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let weights = weights.clone();
        Ok(self.tape.push_op(
            Tensor::scalar(total),
            &[self],
            Box::new(move |g, _| vec![Some(weights.scale(g.item()))]),
            "weighted_sum",
        ))
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let out = self.value().scale(factor);
        self.tape.push_op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.scale(factor))]),
            "scale",
        )
    }

    /// Element-wise product with another variable of the same shape.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.push_op(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |x, y| x * y).expect("same shape")),
                    needs[1].then(|| g.zip_map(&a, |x, y| x * y).expect("same shape")),
                ]
            }),
            "mul",
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_product_and_sum() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let b = tape.leaf(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap(), true);
        let c = tape.constant(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        let loss = a.mul(b).unwrap().mul(c).unwrap().sum();
        assert_eq!(loss.value().item(), 32.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn reused_variables_accumulate() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap(), true);
        let loss = a.mul(a).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(
            tape.backward(a.scale(2.0)),
            Err(TensorError::NotScalar(_))
        ));
    }

    #[test]
    fn non_finite_values_are_recorded() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::new(vec![1], vec![f32::MAX]).unwrap(), true);
        assert!(tape.first_non_finite().is_none());
        let _ = a.scale(10.0);
        if cfg!(debug_assertions) {
            assert_eq!(tape.first_non_finite(), Some((1, "scale")));
        }
    }
}
