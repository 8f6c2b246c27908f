//! Executable networks compiled from a [`NetworkSpec`].
//!
//! Every functional unit reads the aggregate of its graph predecessors,
//! `y_l = F_l(agg(y_{l - c^0}, y_{l - c^1}, ...))`. Outputs are cached only
//! while a later consumer still needs them; the forward pass counts how many
//! are alive at once.

mod checkpoint;
mod forward;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::architecture::{plan_network, ArchError, Family, NetworkPlan, NetworkSpec, Op};
use crate::tensor::io::TensorIoError;
use crate::tensor::{AggregateOp, RunningStats, Scalar, Tensor, TensorError};

pub use checkpoint::{Manifest, MANIFEST_FILE};
pub use forward::{ForwardPass, ForwardStats, ParamVars, StepOutput};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite activation in {layer}")]
    NonFinite { layer: String },
    #[error("input batch has shape {found:?}, expected (N, {expected:?})")]
    InputShape {
        expected: [usize; 3],
        found: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for spec {found}, but the given spec hashes to {expected}")]
    HashMismatch { expected: String, found: String },
}

/// How a named parameter is created.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Init {
    /// He normal with the given fan-in.
    He(usize),
    Ones,
    Zeros,
}

/// Names, shapes and initializers of the parameters owned by `ops`, in the
/// order the forward pass consumes them.
pub(crate) fn op_params(prefix: &str, ops: &[Op]) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let (mut conv, mut bn) = (0, 0);
    for op in ops {
        match *op {
            Op::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                out.push((
                    format!("{prefix}.conv{conv}.weight"),
                    vec![out_channels, in_channels, kernel, kernel],
                    Init::He(in_channels * kernel * kernel),
                ));
                conv += 1;
            }
            Op::BatchNorm { channels } => {
                out.push((format!("{prefix}.bn{bn}.gamma"), vec![channels], Init::Ones));
                out.push((format!("{prefix}.bn{bn}.beta"), vec![channels], Init::Zeros));
                bn += 1;
            }
            Op::Linear {
                in_features,
                out_features,
            } => {
                out.push((
                    format!("{prefix}.fc.weight"),
                    vec![out_features, in_features],
                    Init::He(in_features),
                ));
                out.push((format!("{prefix}.fc.bias"), vec![out_features], Init::Zeros));
            }
            Op::Relu | Op::MaxPool { .. } | Op::AvgPool { .. } | Op::GlobalAvgPool => {}
        }
    }
    out
}

/// `(prefix, ops)` for every component, in execution order.
pub(crate) fn components(plan: &NetworkPlan) -> Vec<(String, &[Op])> {
    let mut out: Vec<(String, &[Op])> = vec![("stem".into(), &plan.stem.ops)];
    for (i, scope) in plan.scopes.iter().enumerate() {
        for layer in &scope.layers {
            for proj in scope.projections.iter().filter(|p| p.dst == layer.node) {
                out.push((format!("proj{}to{}", proj.src, proj.dst), &proj.ops));
            }
            out.push((layer.name(), &layer.ops));
        }
        for proj in scope
            .projections
            .iter()
            .filter(|p| p.dst == scope.num_nodes)
        {
            out.push((format!("proj{}to{}", proj.src, proj.dst), &proj.ops));
        }
        if let Some(t) = plan.transitions.get(i) {
            out.push((format!("transition{}", t.after_block), &t.ops));
        }
    }
    out.push(("head".into(), &plan.head.ops));
    out
}

/// A compiled network with its parameters and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    spec: NetworkSpec,
    plan: NetworkPlan,
    spec_hash: String,
    seed: u64,
    /// Completed training epochs.
    pub epoch: u64,
    params: IndexMap<String, Tensor<T>>,
    bn_stats: IndexMap<String, RunningStats<T>>,
}

impl<T: Scalar> Network<T> {
    /// Plans `spec` and initializes parameters deterministically from `seed`:
    /// He fan-in normal for convolutions and linear weights, `gamma = 1`,
    /// `beta = 0`, zero bias.
    pub fn compile(spec: &NetworkSpec, seed: u64) -> Result<Self, ModelError> {
        let plan = plan_network(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        let mut bn_stats = IndexMap::new();
        for (prefix, ops) in components(&plan) {
            for (name, shape, init) in op_params(&prefix, ops) {
                let tensor = match init {
                    Init::He(fan_in) => {
                        Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                    }
                    Init::Ones => Tensor::full(&shape, T::one()),
                    Init::Zeros => Tensor::zeros(&shape),
                };
                if let Some(bn) = name.strip_suffix(".gamma") {
                    bn_stats.insert(bn.to_string(), RunningStats::new(shape[0]));
                }
                params.insert(name, tensor);
            }
        }
        Ok(Network {
            spec: spec.clone(),
            plan,
            spec_hash: spec.hash(),
            seed,
            epoch: 0,
            params,
            bn_stats,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    pub fn spec_hash(&self) -> &str {
        &self.spec_hash
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn aggregate_op(&self) -> AggregateOp {
        match self.spec.family {
            Family::Sum => AggregateOp::Sum,
            Family::Concat => AggregateOp::Concat,
            Family::Average => AggregateOp::Average,
        }
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Mutable access to parameter values; shapes must be preserved.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<(), ModelError> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter {name}")))?;
        slot.expect_same_shape(&value, "set_param")?;
        *slot = value;
        Ok(())
    }

    pub fn bn_stats(&self) -> &IndexMap<String, RunningStats<T>> {
        &self.bn_stats
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> u64 {
        self.params.values().map(|t| t.len() as u64).sum()
    }

    /// The same network with every parameter and statistic converted to `U`.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            plan: self.plan.clone(),
            spec_hash: self.spec_hash.clone(),
            seed: self.seed,
            epoch: self.epoch,
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            bn_stats: self
                .bn_stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: s.mean.cast(),
                            var: s.var.cast(),
                            momentum: s.momentum,
                            eps: s.eps,
                            updates: s.updates,
                        },
                    )
                })
                .collect(),
        }
    }
}
