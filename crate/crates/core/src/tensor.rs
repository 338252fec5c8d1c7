//! Dense f64 tensors and a dynamically recorded reverse-mode autodiff tape.
//!
//! A [`Tensor`] is a plain value: shape plus row-major data. Differentiable
//! computation happens on a [`Tape`]: leaves are registered with
//! [`Tape::leaf`], every operation appends a node, and [`Tape::backward`]
//! replays the recorded nodes in reverse to produce a [`GradientMap`] for
//! all tracked leaves. [`finite_diff_grad`] is the independent central
//! difference oracle used to verify every backward rule.

use crate::error::{Error, Result};
use crate::ops::Op;

/// Dense N-dimensional array of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad_tracked: bool,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data. Gradient tracking is
    /// off; use [`Tensor::param`] or [`Tensor::with_grad`] for parameters.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad_tracked: false,
        })
    }

    /// A gradient-tracked tensor (a parameter).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Ok(Tensor::new(shape, data)?.with_grad())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product::<usize>().max(1);
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product::<usize>().max(1);
        Tensor::new(shape, vec![1.0; numel]).expect("ones: valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product::<usize>().max(1);
        Tensor::new(shape, vec![value; numel]).expect("full: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(&[1], vec![value]).expect("scalar")
    }

    pub fn with_grad(mut self) -> Self {
        self.grad_tracked = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad_tracked(&self) -> bool {
        self.grad_tracked
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Element at a multi-dimensional index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} ({dim})");
            flat = flat * dim + ix;
        }
        flat
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    /// True when a tracked leaf is reachable through this node.
    pub tracked: bool,
}

/// Recorded forward computation. Append order is topological by
/// construction: an operation can only reference ids that already exist.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients for every tracked leaf of a tape, keyed by leaf id.
/// Leaves the loss never touched map to zero tensors.
#[derive(Debug, Clone)]
pub struct GradientMap {
    entries: Vec<(TensorId, Tensor)>,
}

impl GradientMap {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.entries
            .binary_search_by_key(&id, |(k, _)| *k)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (TensorId, &Tensor)> {
        self.entries.iter().map(|(id, g)| (*id, g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf value. Tracking follows the tensor's own flag.
    pub fn leaf(&mut self, value: &Tensor) -> TensorId {
        let tracked = value.grad_tracked();
        self.push(value.clone(), Op::Leaf, tracked)
    }

    /// Register an untracked input (images, ground truths).
    pub fn input(&mut self, value: &Tensor) -> TensorId {
        self.push(value.clone(), Op::Leaf, false)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, op, tracked });
        id
    }

    pub(crate) fn node(&self, id: TensorId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::NotOnTape(id.0))
    }

    pub fn value(&self, id: TensorId) -> Result<&Tensor> {
        Ok(&self.node(id)?.value)
    }

    pub fn shape(&self, id: TensorId) -> Result<&[usize]> {
        Ok(self.node(id)?.value.shape())
    }

    pub fn is_tracked(&self, id: TensorId) -> Result<bool> {
        Ok(self.node(id)?.tracked)
    }

    pub(crate) fn any_tracked(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].tracked)
    }

    /// Reverse-mode sweep from a scalar loss. Returns d(loss)/d(leaf) for
    /// every tracked leaf on the tape; untouched leaves map to zeros.
    /// Replaying the same tape is pure: identical calls yield identical maps.
    pub fn backward(&self, loss: TensorId) -> Result<GradientMap> {
        let loss_node = self.node(loss)?;
        let numel = loss_node.value.numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let upstream = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            node.op.accumulate(self, &node.value, &upstream, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(upstream);
            }
        }

        let mut entries = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.tracked && matches!(node.op, Op::Leaf) {
                let grad = match grads[idx].take() {
                    Some(g) => Tensor::new(node.value.shape(), g)?,
                    None => Tensor::zeros(node.value.shape()),
                };
                entries.push((TensorId(idx), grad));
            }
        }
        Ok(GradientMap { entries })
    }

    /// Scatter `amount` into the gradient slot for `target`, allocating on
    /// first touch. Fan-out accumulates by addition.
    pub(crate) fn accumulate_grad(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: TensorId,
        amount: &[f64],
    ) {
        let node = &self.nodes[target.0];
        if !node.tracked {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        for (g, a) in slot.iter_mut().zip(amount) {
            *g += a;
        }
    }
}

/// Central-difference gradient of a tensor-to-scalar function:
/// `(f(x + eps·e_k) − f(x − eps·e_k)) / (2·eps)` per element `k`.
#[allow(clippy::needless_range_loop)]
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for k in 0..x.numel() {
        let original = probe.data()[k];
        probe.data_mut()[k] = original + eps;
        let plus = eval_scalar(&mut f, &probe)?;
        probe.data_mut()[k] = original - eps;
        let minus = eval_scalar(&mut f, &probe)?;
        probe.data_mut()[k] = original;
        grad[k] = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape(), grad)
}

fn eval_scalar<F>(f: &mut F, x: &Tensor) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let out = f(x)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss { numel: out.numel() });
    }
    Ok(out.data()[0])
}

/// Relative error used by every gradient check:
/// `|analytic − numeric| / max(1, |numeric|)`, maximized over elements.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs() / n.abs().max(1.0)))
}
