use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor, TensorError, Var};

/// How the outputs of several earlier layers are combined into one input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateOp {
    Sum,
    Concat,
    Average,
}

fn check<T: Scalar>(op: AggregateOp, inputs: &[&Tensor<T>]) -> Result<(), TensorError> {
    let first = inputs.first().ok_or(TensorError::EmptyInput("aggregate"))?;
    match op {
        AggregateOp::Sum | AggregateOp::Average => {
            for t in &inputs[1..] {
                first.expect_same_shape(t, "aggregate")?;
            }
        }
        AggregateOp::Concat => {
            let (n, _, h, w) = first.dims4("aggregate")?;
            for t in &inputs[1..] {
                let (tn, _, th, tw) = t.dims4("aggregate")?;
                if (tn, th, tw) != (n, h, w) {
                    return Err(TensorError::ShapeMismatch {
                        op: "aggregate",
                        expected: format!("N,H,W = {n},{h},{w}"),
                        found: format!("{:?}", t.shape()),
                    });
                }
            }
        }
    }
    Ok(())
}

fn combine<T: Scalar>(op: AggregateOp, inputs: &[&Tensor<T>]) -> Tensor<T> {
    match op {
        AggregateOp::Sum | AggregateOp::Average => {
            let mut out = inputs[0].clone();
            for t in &inputs[1..] {
                out.accumulate(t).expect("checked");
            }
            if op == AggregateOp::Average && inputs.len() > 1 {
                out = out.scale(T::one() / T::from_f64(inputs.len() as f64));
            }
            out
        }
        AggregateOp::Concat => {
            let (n, _, h, w) = inputs[0].dims4("aggregate").expect("checked");
            let plane = h * w;
            let total: usize = inputs.iter().map(|t| t.shape()[1]).sum();
            let mut data = Vec::with_capacity(n * total * plane);
            for b in 0..n {
                for t in inputs {
                    let c = t.shape()[1];
                    data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
                }
            }
            Tensor::new(vec![n, total, h, w], data).expect("concat shape")
        }
    }
}

/// Combines tensors without recording gradients. Concat joins along the
/// channel axis in the given order.
pub fn aggregate_tensors<T: Scalar>(
    op: AggregateOp,
    inputs: &[&Tensor<T>],
) -> Result<Tensor<T>, TensorError> {
    check(op, inputs)?;
    Ok(combine(op, inputs))
}

/// Differentiable [`aggregate_tensors`]. A single input is returned as is.
pub fn aggregate<'t, T: Scalar>(
    op: AggregateOp,
    inputs: &[Var<'t, T>],
) -> Result<Var<'t, T>, TensorError> {
    let first = *inputs.first().ok_or(TensorError::EmptyInput("aggregate"))?;
    if inputs.len() == 1 {
        return Ok(first);
    }
    assert!(
        inputs.iter().all(|v| v.same_tape(&first)),
        "aggregate across tapes"
    );
    let values: Vec<_> = inputs.iter().map(|v| v.value()).collect();
    let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
    check(op, &refs)?;
    let out = combine(op, &refs);
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    drop(values);
    let count = inputs.len();
    Ok(first.tape().push_op(
        out,
        inputs,
        Box::new(move |dy, needs| match op {
            AggregateOp::Sum => needs.iter().map(|&n| n.then(|| dy.clone())).collect(),
            AggregateOp::Average => {
                let g = dy.scale(T::one() / T::from_f64(count as f64));
                needs.iter().map(|&n| n.then(|| g.clone())).collect()
            }
            AggregateOp::Concat => {
                let mut start = 0;
                shapes
                    .iter()
                    .zip(needs)
                    .map(|(shape, &need)| {
                        let c = shape[1];
                        let g = need.then(|| dy.channel_slice(start, c).expect("concat slice"));
                        start += c;
                        g
                    })
                    .collect()
            }
        }),
        "aggregate",
    ))
}
