use indexmap::IndexMap;

use super::{ModelError, Network};
use crate::architecture::{Op, ScopePlan};
use crate::tensor::{aggregate, BatchStats, Mode, Scalar, Tape, Tensor, Var};

/// Parameters registered on a tape, by name.
pub struct ParamVars<'t, T: Scalar> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> ParamVars<'t, T> {
    pub fn get(&self, name: &str) -> Var<'t, T> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, T>)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Cache instrumentation for one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Largest number of simultaneously cached outputs, per scope.
    pub peak_live: Vec<usize>,
    /// Cached outputs still held after each layer, per scope.
    pub live_after_layer: Vec<Vec<usize>>,
}

pub struct ForwardPass<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    /// Batch statistics gathered in train mode, by batch-norm name.
    pub bn_updates: Vec<(String, BatchStats<T>)>,
    pub stats: ForwardStats,
}

/// Result of one differentiated training batch.
#[derive(Debug, Clone)]
pub struct StepOutput<T: Scalar> {
    pub loss: T,
    pub logits: Tensor<T>,
    pub grads: IndexMap<String, Tensor<T>>,
}

struct Ctx<'a, 't, T: Scalar> {
    vars: &'a ParamVars<'t, T>,
    mode: Mode,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

fn finite<T: Scalar>(v: Var<'_, T>, layer: &str) -> Result<(), ModelError> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite {
            layer: layer.to_string(),
        })
    }
}

impl<T: Scalar> Network<T> {
    /// Registers every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> ParamVars<'t, T> {
        ParamVars {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Pairs externally created variables with parameter names, in
    /// [`Network::params`] order.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t, T>]) -> ParamVars<'t, T> {
        assert_eq!(vars.len(), self.params.len(), "one variable per parameter");
        ParamVars {
            vars: self
                .params
                .keys()
                .cloned()
                .zip(vars.iter().copied())
                .collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let i = self.spec.input;
        let expected = [i.channels, i.height, i.width];
        if shape.len() != 4 || shape[1..] != expected || shape[0] == 0 {
            return Err(ModelError::InputShape {
                expected,
                found: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Records the forward pass on `input`'s tape. Running statistics are not
    /// touched; train-mode batch statistics are returned in the pass.
    pub fn forward_vars<'t>(
        &self,
        vars: &ParamVars<'t, T>,
        input: Var<'t, T>,
        mode: Mode,
    ) -> Result<ForwardPass<'t, T>, ModelError> {
        self.check_input(&input.shape())?;
        let mut ctx = Ctx {
            vars,
            mode,
            bn_updates: Vec::new(),
        };
        let mut stats = ForwardStats::default();
        let mut x = self.run_ops(&mut ctx, "stem", &self.plan.stem.ops, input)?;
        finite(x, "stem")?;
        for (i, scope) in self.plan.scopes.iter().enumerate() {
            x = self.run_scope(&mut ctx, scope, x, &mut stats)?;
            if let Some(t) = self.plan.transitions.get(i) {
                let name = format!("transition{}", t.after_block);
                x = self.run_ops(&mut ctx, &name, &t.ops, x)?;
                finite(x, &name)?;
            }
        }
        let logits = self.run_ops(&mut ctx, "head", &self.plan.head.ops, x)?;
        finite(logits, "head")?;
        Ok(ForwardPass {
            logits,
            bn_updates: ctx.bn_updates,
            stats,
        })
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)]) {
        for (name, batch) in updates {
            self.bn_stats
                .get_mut(name)
                .unwrap_or_else(|| panic!("unknown batch norm {name}"))
                .update(batch);
        }
    }

    /// Logits for `batch`. Train mode normalizes with batch statistics and
    /// updates the running statistics; eval mode is a pure function.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, ModelError> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let pass = self.forward_vars(&vars, tape.constant(batch.clone()), mode)?;
        let logits = (*pass.logits.value()).clone();
        self.apply_bn_updates(&pass.bn_updates);
        Ok(logits)
    }

    /// Eval-mode logits without touching any state.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let pass = self.forward_vars(&vars, tape.constant(batch.clone()), Mode::Eval)?;
        let logits = (*pass.logits.value()).clone();
        Ok(logits)
    }

    /// Gradients of `loss` for every bound parameter, by name.
    pub fn backward<'t>(
        &self,
        vars: &ParamVars<'t, T>,
        loss: Var<'t, T>,
    ) -> Result<IndexMap<String, Tensor<T>>, ModelError> {
        let grads = loss.tape().backward(loss)?;
        Ok(vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v)))
            .collect())
    }

    /// Train-mode forward, mean cross-entropy and gradients for one batch.
    /// Running statistics are updated.
    pub fn compute_gradients(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
    ) -> Result<StepOutput<T>, ModelError> {
        let tape = Tape::new();
        let vars = self.bind(&tape, true);
        let pass = self.forward_vars(&vars, tape.constant(batch.clone()), Mode::Train)?;
        let loss = pass.logits.softmax_cross_entropy(labels)?;
        let grads = self.backward(&vars, loss)?;
        let out = StepOutput {
            loss: loss.value().item(),
            logits: (*pass.logits.value()).clone(),
            grads,
        };
        self.apply_bn_updates(&pass.bn_updates);
        Ok(out)
    }

    fn run_ops<'t>(
        &self,
        ctx: &mut Ctx<'_, 't, T>,
        prefix: &str,
        ops: &[Op],
        mut x: Var<'t, T>,
    ) -> Result<Var<'t, T>, ModelError> {
        let (mut conv, mut bn) = (0, 0);
        for op in ops {
            x = match *op {
                Op::BatchNorm { .. } => {
                    let name = format!("{prefix}.bn{bn}");
                    bn += 1;
                    let gamma = ctx.vars.get(&format!("{name}.gamma"));
                    let beta = ctx.vars.get(&format!("{name}.beta"));
                    let (y, batch) = x.batch_norm(gamma, beta, &self.bn_stats[&name], ctx.mode)?;
                    if let Some(batch) = batch {
                        ctx.bn_updates.push((name, batch));
                    }
                    y
                }
                Op::Relu => x.relu(),
                Op::Conv {
                    stride, padding, ..
                } => {
                    let w = ctx.vars.get(&format!("{prefix}.conv{conv}.weight"));
                    conv += 1;
                    x.conv2d(w, stride, padding)?
                }
                Op::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => x.max_pool2d(kernel, stride, padding)?,
                Op::AvgPool { kernel, stride } => x.avg_pool2d(kernel, stride)?,
                Op::GlobalAvgPool => x.global_avg_pool()?,
                Op::Linear { .. } => {
                    let w = ctx.vars.get(&format!("{prefix}.fc.weight"));
                    let b = ctx.vars.get(&format!("{prefix}.fc.bias"));
                    x.linear(w, Some(b))?
                }
            };
        }
        Ok(x)
    }

    fn gather<'t>(
        &self,
        ctx: &mut Ctx<'_, 't, T>,
        scope: &ScopePlan,
        cache: &mut OutputCache<'t, T>,
        sources: &[usize],
        dst: usize,
    ) -> Result<Var<'t, T>, ModelError> {
        let mut inputs = Vec::with_capacity(sources.len());
        for &s in sources {
            let v = cache.read(s);
            let v = match scope.projection(s, dst) {
                Some(p) => self.run_ops(ctx, &format!("proj{s}to{dst}"), &p.ops, v)?,
                None => v,
            };
            inputs.push(v);
        }
        Ok(aggregate(self.aggregate_op(), &inputs)?)
    }

    /// Runs one aggregation scope. An output stays cached exactly while some
    /// later consumer (a layer or the scope exit) has yet to read it.
    fn run_scope<'t>(
        &self,
        ctx: &mut Ctx<'_, 't, T>,
        scope: &ScopePlan,
        input: Var<'t, T>,
        stats: &mut ForwardStats,
    ) -> Result<Var<'t, T>, ModelError> {
        let mut cache = OutputCache::new(scope);
        let mut trace = Vec::with_capacity(scope.layers.len());
        cache.store(0, input);
        for layer in &scope.layers {
            let x = self.gather(ctx, scope, &mut cache, &layer.sources, layer.node)?;
            let name = layer.name();
            let y = self.run_ops(ctx, &name, &layer.ops, x)?;
            finite(y, &name)?;
            cache.store(layer.node, y);
            trace.push(cache.live);
        }
        let out = self.gather(ctx, scope, &mut cache, &scope.exit_sources, scope.num_nodes)?;
        debug_assert_eq!(cache.live, 0);
        stats.peak_live.push(cache.peak);
        stats.live_after_layer.push(trace);
        Ok(out)
    }
}

/// Outputs awaiting future readers, with reference counts from the graph.
struct OutputCache<'t, T: Scalar> {
    slots: Vec<Option<Var<'t, T>>>,
    pending: Vec<usize>,
    live: usize,
    peak: usize,
}

impl<'t, T: Scalar> OutputCache<'t, T> {
    fn new(scope: &ScopePlan) -> Self {
        let mut pending = vec![0usize; scope.num_nodes];
        for layer in &scope.layers {
            for &s in &layer.sources {
                pending[s] += 1;
            }
        }
        for &s in &scope.exit_sources {
            pending[s] += 1;
        }
        OutputCache {
            slots: vec![None; scope.num_nodes],
            pending,
            live: 0,
            peak: 0,
        }
    }

    fn store(&mut self, node: usize, v: Var<'t, T>) {
        if self.pending[node] > 0 {
            self.slots[node] = Some(v);
            self.live += 1;
            self.peak = self.peak.max(self.live);
        }
    }

    fn read(&mut self, node: usize) -> Var<'t, T> {
        let v = self.slots[node].expect("source output cached");
        self.pending[node] -= 1;
        if self.pending[node] == 0 {
            self.slots[node] = None;
            self.live -= 1;
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architecture::presets;
    use crate::topology::TopologyKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, seed: u64) -> Tensor<f32> {
        Tensor::randn(&[n, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn logits_shape() {
        let spec = presets::cifar_concat(TopologyKind::Sparse(2), &[3; 3], &[4; 3], true);
        let mut net = Network::<f32>::compile(&spec, 0).unwrap();
        let logits = net.forward(&batch(8, 1), Mode::Train).unwrap();
        assert_eq!(logits.shape(), &[8, 10]);
        assert!(net.bn_stats().values().all(|s| s.updates == 1));
    }

    #[test]
    fn rejects_wrong_input() {
        let spec = presets::cifar_concat(TopologyKind::Dense, &[2], &[4], false);
        let net = Network::<f32>::compile(&spec, 0).unwrap();
        let bad = Tensor::zeros(&[2, 3, 16, 16]);
        assert!(matches!(
            net.predict(&bad),
            Err(ModelError::InputShape { .. })
        ));
    }

    #[test]
    fn eval_is_pure() {
        let spec = presets::cifar_sum(TopologyKind::Sparse(2), &[2, 2], &[8, 16]);
        let net = Network::<f32>::compile(&spec, 2).unwrap();
        let x = batch(3, 5);
        assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
    }

    #[test]
    fn non_finite_names_layer() {
        let spec = presets::cifar_concat(TopologyKind::Dense, &[2], &[4], false);
        let mut net = Network::<f32>::compile(&spec, 0).unwrap();
        let shape = net
            .param("block1.layer2.conv0.weight")
            .unwrap()
            .shape()
            .to_vec();
        net.set_param("block1.layer2.conv0.weight", Tensor::full(&shape, f32::NAN))
            .unwrap();
        match net.predict(&batch(2, 0)) {
            Err(ModelError::NonFinite { layer }) => assert_eq!(layer, "block1.layer2"),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn gradients_cover_every_parameter() {
        let spec = presets::cifar_concat(TopologyKind::Sparse(2), &[2, 2], &[4, 4], false);
        let mut net = Network::<f32>::compile(&spec, 0).unwrap();
        let out = net.compute_gradients(&batch(4, 2), &[0, 1, 2, 3]).unwrap();
        assert_eq!(out.grads.len(), net.params().len());
        for (name, g) in &out.grads {
            assert_eq!(g.shape(), net.param(name).unwrap().shape());
        }
        assert!(out.loss.is_finite());
    }
}
