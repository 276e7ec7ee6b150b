//! Reverse-mode differentiation over a define-by-run tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]; each node
//! stores its value plus whatever its backward rule needs. [`Tape::backward`]
//! walks the nodes in reverse order and accumulates gradients by addition,
//! so a value that fans out (an encoder output feeding both the next block
//! and a skip connection) receives the sum of its consumers' gradients.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, BnCache, PoolIndices};
use crate::tensor::{Element, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(T),
    Sum,
    Mean,
    /// inputs: `[x, kernel, bias]`
    Conv2d {
        padding: usize,
    },
    /// inputs: `[x, gamma, beta]`
    BatchNormTrain {
        eps: f64,
    },
    /// inputs: `[x, gamma, beta]`; running statistics are constants.
    BatchNormEval {
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
        eps: f64,
    },
    Relu,
    MaxPool,
    /// Unpools with the indices recorded by the `MaxPool` node `pool`.
    MaxUnpool {
        pool: NodeId,
    },
    SoftmaxChannels,
    /// inputs: `[probs]`
    WeightedCrossEntropy {
        target: Vec<u8>,
        weights: Vec<f64>,
        fov: Vec<u8>,
    },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNormTrain { .. } => "batchnorm_train",
            Op::BatchNormEval { .. } => "batchnorm_eval",
            Op::Relu => "relu",
            Op::MaxPool => "maxpool2d",
            Op::MaxUnpool { .. } => "maxunpool2d",
            Op::SoftmaxChannels => "softmax_channels",
            Op::WeightedCrossEntropy { .. } => "weighted_cross_entropy",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::Add | Op::Sub | Op::Mul => 2,
            Op::Conv2d { .. } | Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Saved<T> {
    None,
    BatchNorm(BnCache<T>),
    Pool(PoolIndices),
}

#[derive(Clone, Debug)]
pub struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    saved: Saved<T>,
}

impl<T: Element> Node<T> {
    pub fn op(&self) -> &Op<T> {
        &self.op
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn pool_indices(&self) -> Option<&PoolIndices> {
        match &self.saved {
            Saved::Pool(idx) => Some(idx),
            _ => None,
        }
    }

    pub fn batch_norm_cache(&self) -> Option<&BnCache<T>> {
        match &self.saved {
            Saved::BatchNorm(cache) => Some(cache),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        Ok(&self.node(id)?.value)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, Saved::None)
    }

    fn push(
        &mut self,
        op: Op<T>,
        inputs: Vec<NodeId>,
        value: Tensor<T>,
        saved: Saved<T>,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
        });
        self.nodes.len() - 1
    }

    /// Computes `op` on the values of `inputs` and appends the result.
    pub fn record(&mut self, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(op, Op::Leaf) {
            return Err(Error::invalid("record", "leaves are added with Tape::leaf"));
        }
        if inputs.len() != op.arity() {
            return Err(Error::invalid(
                "record",
                format!(
                    "{} takes {} inputs, got {}",
                    op.name(),
                    op.arity(),
                    inputs.len()
                ),
            ));
        }
        for &id in inputs {
            self.node(id)?;
        }
        let v = |i: usize| &self.nodes[inputs[i]].value;
        let (value, saved) = match &op {
            Op::Leaf => unreachable!(),
            Op::Add => (v(0).add(v(1))?, Saved::None),
            Op::Sub => (v(0).sub(v(1))?, Saved::None),
            Op::Mul => (v(0).mul(v(1))?, Saved::None),
            Op::Scale(s) => (v(0).scale(*s), Saved::None),
            Op::Sum => (Tensor::scalar(v(0).sum_all()), Saved::None),
            Op::Mean => (Tensor::scalar(v(0).mean_all()), Saved::None),
            Op::Conv2d { padding } => (layers::conv2d(v(0), v(1), v(2), *padding)?, Saved::None),
            Op::BatchNormTrain { eps } => {
                let (y, cache) = layers::batchnorm2d_train(v(0), v(1), v(2), *eps)?;
                (y, Saved::BatchNorm(cache))
            }
            Op::BatchNormEval {
                running_mean,
                running_var,
                eps,
            } => (
                layers::batchnorm2d_eval(v(0), v(1), v(2), running_mean, running_var, *eps)?,
                Saved::None,
            ),
            Op::Relu => (layers::relu(v(0)), Saved::None),
            Op::MaxPool => {
                let (y, idx) = layers::maxpool2d(v(0))?;
                (y, Saved::Pool(idx))
            }
            Op::MaxUnpool { pool } => {
                let idx = self.pool_indices(*pool)?;
                (layers::maxunpool2d(v(0), idx)?, Saved::None)
            }
            Op::SoftmaxChannels => (layers::softmax_channels(v(0))?, Saved::None),
            Op::WeightedCrossEntropy {
                target,
                weights,
                fov,
            } => (
                Tensor::scalar(layers::weighted_cross_entropy(v(0), target, weights, fov)?),
                Saved::None,
            ),
        };
        Ok(self.push(op, inputs.to_vec(), value, saved))
    }

    fn pool_indices(&self, pool: NodeId) -> Result<&PoolIndices> {
        self.node(pool)?
            .pool_indices()
            .ok_or_else(|| Error::invalid("maxunpool2d", format!("node {pool} is not a max-pool")))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        self.record(Op::Scale(s), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Mean, &[a])
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        padding: usize,
    ) -> Result<NodeId> {
        self.record(Op::Conv2d { padding }, &[x, kernel, bias])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Relu, &[x])
    }

    pub fn maxpool2d(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::MaxPool, &[x])
    }

    pub fn maxunpool2d(&mut self, y: NodeId, pool: NodeId) -> Result<NodeId> {
        self.record(Op::MaxUnpool { pool }, &[y])
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::SoftmaxChannels, &[x])
    }

    /// Runs the backward sweep from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss + 1];
        grads[loss] = Some(Tensor::ones(root.value.shape())?);

        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // Intermediate gradients are released once propagated; only
            // leaves and the loss itself are reported.
            let grad = if id == loss {
                grads[id].clone()
            } else {
                grads[id].take()
            };
            let Some(grad) = grad else { continue };
            for (input, g) in self.input_grads(node, &grad)? {
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node<T>, grad: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let inputs = &node.inputs;
        let v = |i: usize| &self.nodes[inputs[i]].value;
        let scalar = || grad.data()[0];
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![(inputs[0], grad.clone()), (inputs[1], grad.clone())],
            Op::Sub => vec![
                (inputs[0], grad.clone()),
                (inputs[1], grad.scale(-T::one())),
            ],
            Op::Mul => vec![(inputs[0], grad.mul(v(1))?), (inputs[1], grad.mul(v(0))?)],
            Op::Scale(s) => vec![(inputs[0], grad.scale(*s))],
            Op::Sum => vec![(inputs[0], Tensor::full(v(0).shape(), scalar())?)],
            Op::Mean => {
                let n = T::from_usize(v(0).len()).expect("length fits");
                vec![(inputs[0], Tensor::full(v(0).shape(), scalar() / n)?)]
            }
            Op::Conv2d { padding } => {
                let g = layers::conv2d_backward(v(0), v(1), grad, *padding)?;
                vec![
                    (inputs[0], g.input),
                    (inputs[1], g.kernel),
                    (inputs[2], g.bias),
                ]
            }
            Op::BatchNormTrain { .. } => {
                let Saved::BatchNorm(cache) = &node.saved else {
                    unreachable!("train batch norm saves its cache")
                };
                let g = layers::batchnorm2d_train_backward(cache, v(1), grad)?;
                vec![
                    (inputs[0], g.input),
                    (inputs[1], g.gamma),
                    (inputs[2], g.beta),
                ]
            }
            Op::BatchNormEval {
                running_mean,
                running_var,
                eps,
            } => {
                let g = layers::batchnorm2d_eval_backward(
                    v(0),
                    v(1),
                    running_mean,
                    running_var,
                    *eps,
                    grad,
                )?;
                vec![
                    (inputs[0], g.input),
                    (inputs[1], g.gamma),
                    (inputs[2], g.beta),
                ]
            }
            Op::Relu => vec![(inputs[0], layers::relu_backward(v(0), grad)?)],
            Op::MaxPool => {
                let Saved::Pool(idx) = &node.saved else {
                    unreachable!("max-pool saves its indices")
                };
                vec![(inputs[0], layers::maxpool2d_backward(grad, idx)?)]
            }
            Op::MaxUnpool { pool } => {
                let idx = self.pool_indices(*pool)?;
                vec![(inputs[0], layers::maxunpool2d_backward(grad, idx)?)]
            }
            Op::SoftmaxChannels => {
                vec![(
                    inputs[0],
                    layers::softmax_channels_backward(&node.value, grad)?,
                )]
            }
            Op::WeightedCrossEntropy {
                target,
                weights,
                fov,
            } => {
                let g = layers::weighted_cross_entropy_backward(v(0), target, weights, fov)?;
                vec![(inputs[0], g.scale(scalar()))]
            }
        };
        Ok(out)
    }

    /// Hash of every discrete decision taken by the forward pass: ReLU
    /// activity patterns and max-pool argmax positions. Two evaluations with
    /// equal signatures lie in the same smooth piece of the function.
    pub fn nonsmooth_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match (&node.op, &node.saved) {
                (Op::Relu, _) => {
                    let input = &self.nodes[node.inputs[0]].value;
                    for v in input.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                (_, Saved::Pool(idx)) => idx.offsets().hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}

/// Gradients of the loss with respect to every leaf (and the loss itself).
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` if `id` is not reachable from the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many entries per tensor, chosen by a seeded draw.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: DEFAULT_STEP,
            tolerance: 1e-4,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose difference stencil crossed a ReLU kink or pool tie.
    pub skipped: usize,
    /// Entries outside the relative tolerance whose absolute difference is
    /// below what the central difference can resolve. They count as
    /// agreeing and are left out of `max_rel_error`.
    pub at_noise_floor: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn merge(&mut self, prefix: &str, other: GradcheckReport) {
        self.params.extend(other.params.into_iter().map(|mut p| {
            p.name = format!("{prefix}{}", p.name);
            p
        }));
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .params
            .iter()
            .map(|p| p.name.len())
            .max()
            .unwrap_or(9)
            .max(9);
        writeln!(
            f,
            "{:<width$}  {:>8}  {:>7}  {:>7}  {:>13}  result",
            "parameter", "checked", "skipped", "floor", "max rel err"
        )?;
        for p in &self.params {
            writeln!(
                f,
                "{:<width$}  {:>8}  {:>7}  {:>7}  {:>13.3e}  {}",
                p.name,
                p.checked,
                p.skipped,
                p.at_noise_floor,
                p.max_rel_error,
                if p.passed { "pass" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "tolerance {:.1e}: {}",
            self.tolerance,
            if self.passed() {
                "all passed"
            } else {
                "FAILED"
            }
        )
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Smallest derivative a central difference can tell apart from zero:
/// a few ulps of the loss spread over the stencil width.
pub fn fd_resolution(plus: f64, minus: f64, step: f64) -> f64 {
    16.0 * f64::EPSILON * plus.abs().max(minus.abs()).max(1.0) / (2.0 * step)
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `build` receives a fresh tape with `params` already registered as leaves
/// (in order) and returns the loss node. Entries whose stencil changes a
/// ReLU mask or pool choice are skipped; entries that differ by less than
/// [`fd_resolution`] count as agreeing.
pub fn gradcheck<F>(
    params: &[(String, Tensor<f64>)],
    build: F,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64, Tape<f64>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        let l = tape.value(loss)?.item()?;
        if !l.is_finite() {
            return Err(Error::NonFinite {
                context: "gradcheck loss".into(),
            });
        }
        Ok((l, tape.nonsmooth_signature(), tape, loss))
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (_, base_sig, tape, loss) = eval(&values)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport {
        tolerance: opts.tolerance,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, (name, value)) in params.iter().enumerate() {
        let analytic = grads
            .get(pi)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(value));
        if !analytic.is_finite() {
            return Err(Error::NonFinite {
                context: format!("analytic gradient of {name}"),
            });
        }
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < value.len() => {
                let mut e = sample(&mut rng, value.len(), k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..value.len()).collect(),
        };

        let (mut checked, mut skipped, mut floor, mut worst) = (0, 0, 0, 0.0f64);
        for e in entries {
            let original = value.data()[e];
            values[pi].data_mut()[e] = original + opts.step;
            let (plus, sig_plus, ..) = eval(&values)?;
            values[pi].data_mut()[e] = original - opts.step;
            let (minus, sig_minus, ..) = eval(&values)?;
            values[pi].data_mut()[e] = original;

            if sig_plus != base_sig || sig_minus != base_sig {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[e];
            let rel = relative_error(a, numeric);
            if rel > opts.tolerance && (a - numeric).abs() <= fd_resolution(plus, minus, opts.step)
            {
                floor += 1;
            } else {
                worst = worst.max(rel);
            }
            checked += 1;
        }
        report.params.push(ParamCheck {
            name: name.clone(),
            checked,
            skipped,
            at_noise_floor: floor,
            max_rel_error: worst,
            passed: worst <= opts.tolerance,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn record_assigns_sequential_ids() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        assert_eq!((a, b), (0, 1));
        let c = tape.record(Op::Add, &[a, b]).unwrap();
        let d = tape.record(Op::Add, &[a, b]).unwrap();
        assert_ne!(c, d);
        assert_eq!(tape.value(c).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn record_rejects_unknown_inputs_and_bad_arity() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::ones(&[1]).unwrap());
        assert!(matches!(
            tape.record(Op::Add, &[a, 7]),
            Err(Error::UnknownNode(7))
        ));
        assert!(tape.record(Op::Add, &[a]).is_err());
        assert!(tape.record(Op::Leaf, &[]).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
        assert_eq!(g.get(loss).unwrap().data(), &[1.0]);
    }

    #[test]
    fn grad_of_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1.0]));
        let unused = tape.leaf(t(&[1], &[1.0]));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn fan_out_accumulates_and_backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.5, -0.5]));
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.mul(x, x).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        // d/dx (3x + x²) = 3 + 2x
        assert_eq!(g1.get(x).unwrap().data(), &[6.0, 2.0]);
        assert_eq!(g1.get(x), g2.get(x));
    }

    #[test]
    fn gradient_of_sum_of_losses_is_sum_of_gradients() {
        let build = |tape: &mut Tape<f64>, x: NodeId, which: u8| -> NodeId {
            let sq = tape.mul(x, x).unwrap();
            let l1 = tape.sum(sq).unwrap();
            let sc = tape.scale(x, -2.5).unwrap();
            let l2 = tape.mean(sc).unwrap();
            match which {
                1 => l1,
                2 => l2,
                _ => tape.add(l1, l2).unwrap(),
            }
        };
        let xv = t(&[3], &[0.25, -1.5, 2.0]);
        let grad = |which| {
            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone());
            let l = build(&mut tape, x, which);
            tape.backward(l).unwrap().get(x).unwrap().clone()
        };
        let sum = grad(1).add(&grad(2)).unwrap();
        assert_eq!(grad(0), sum);
    }

    #[test]
    fn gradcheck_linear_is_exact() {
        // dyadic values and step keep every sum exact
        let params = vec![("x".to_string(), t(&[3], &[0.5, 1.0, -2.0]))];
        let opts = GradcheckOptions {
            step: 2f64.powi(-13),
            ..Default::default()
        };
        let report = gradcheck(&params, |tape, ids| tape.sum(ids[0]), &opts).unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_error(), 0.0);
        assert!(report.to_string().contains("pass"));
    }

    #[test]
    fn gradcheck_flags_a_wrong_rule() {
        let params = vec![("x".to_string(), t(&[2], &[1.0, 2.0]))];
        let report = gradcheck(
            &params,
            |tape, ids| {
                let v = tape.value(ids[0])?.clone();
                // The copy is a separate leaf, so the tape sees x·c and reports
                // c where the true derivative of x² is 2x.
                let frozen = tape.leaf(v);
                let prod = tape.mul(ids[0], frozen)?;
                tape.sum(prod)
            },
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.to_string().contains("FAIL"));
    }

    #[test]
    fn gradcheck_relu_away_from_kink() {
        let params = vec![("x".to_string(), t(&[4], &[-0.7, 0.3, 1.2, -0.01]))];
        let report = gradcheck(
            &params,
            |tape, ids| {
                let r = tape.relu(ids[0])?;
                let sq = tape.mul(r, r)?;
                tape.sum(sq)
            },
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report}");
        assert_eq!(report.params[0].skipped, 0);
    }

    #[test]
    fn gradcheck_skips_stencils_across_a_kink() {
        let params = vec![("x".to_string(), t(&[2], &[5e-5, 1.0]))];
        let report = gradcheck(
            &params,
            |tape, ids| {
                let r = tape.relu(ids[0])?;
                tape.sum(r)
            },
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.params[0].skipped, 1);
        assert_eq!(report.params[0].checked, 1);
    }

    #[test]
    fn gradcheck_rejects_non_finite_loss() {
        let params = vec![("x".to_string(), t(&[1], &[f64::INFINITY]))];
        let err = gradcheck(
            &params,
            |tape, ids| tape.sum(ids[0]),
            &GradcheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
