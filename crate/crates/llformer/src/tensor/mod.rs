//! Dense row-major tensors with reverse-mode autodiff on a Wengert tape.
//!
//! Tracking model: a [`Tape`] hands out *leaves* (tracked copies of plain
//! tensors). Every op whose inputs include at least one tracked tensor
//! records a node — op name, parent ids, and a backward closure — and the
//! result carries the node id. [`backward`] walks the tape in reverse id
//! order (append-only tape ⇒ ids are already topologically sorted) and
//! accumulates gradients for the leaves. Everything is single-threaded and
//! accumulation order is fixed, so two runs over the same graph produce
//! bit-identical gradients.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

mod ops;

pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: self.node.clone(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

/// Equality is on shape and raw data; tracking state is ignored.
impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl<T: Scalar> Tensor<T> {
    /// Panics if `data.len()` does not match the shape's element count.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "from_vec: {} elements for shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data: Arc::new(data), node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![value; numel])
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(vec![1], vec![value])
    }

    /// Uniform draws from `[lo, hi)`, consuming `numel` values from `rng`.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Tensor::from_vec(shape.to_vec(), data)
    }

    /// Normal(0, std) truncated to ±2·std by resampling.
    pub fn rand_trunc_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let normal = Normal::new(0.0f64, std).expect("std must be finite and positive");
        let data = (0..numel)
            .map(|_| loop {
                let v = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break T::from_f64(v);
                }
            })
            .collect();
        Tensor::from_vec(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// Value of a single-element tensor. Panics otherwise.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item: tensor has shape {:?}", self.shape);
        self.data[0]
    }

    /// Element at a full multi-index (for tests and small kernels).
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "at: rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "at: index {ix} out of bounds for axis {i} (size {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same data, no tape history. Backward closures capture detached
    /// tensors only, so the tape never holds a strong cycle onto itself.
    pub fn detach(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    pub(crate) fn with_node(mut self, tape: Tape<T>, id: usize) -> Self {
        self.node = Some(Node { tape, id });
        self
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

// ── Tape ────────────────────────────────────────────────────────────────

pub(crate) struct Node<T: Scalar> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Node<T> {
    fn clone(&self) -> Self {
        Node { tape: self.tape.clone(), id: self.id }
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>> + Send + Sync>;

struct TapeNode<T: Scalar> {
    op: &'static str,
    /// Ids of the *tracked* inputs, in argument order.
    parents: Vec<usize>,
    /// Maps the output gradient to one gradient per parent.
    backward: BackwardFn<T>,
}

/// Append-only record of tracked ops. Cheap to clone (shared); the mutex
/// only serialises recording — graphs are built and consumed single-threaded.
pub struct Tape<T: Scalar> {
    nodes: Arc<Mutex<Vec<TapeNode<T>>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape { nodes: Arc::clone(&self.nodes) }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Arc::new(Mutex::new(Vec::new())) }
    }

    /// Tracked copy of `t` (its current values, fresh history). Gradients
    /// accumulate on leaves; everything else is freed as backward passes it.
    pub fn leaf(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.push(TapeNode { op: "leaf", parents: Vec::new(), backward: Box::new(|_| Vec::new()) });
        t.detach().with_node(self.clone(), id)
    }

    pub fn len(&self) -> usize {
        self.nodes.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: TapeNode<T>) -> usize {
        let mut nodes = self.nodes.lock().unwrap();
        nodes.push(node);
        nodes.len() - 1
    }

    fn same_tape(&self, other: &Tape<T>) -> bool {
        Arc::ptr_eq(&self.nodes, &other.nodes)
    }
}

/// Record `out = op(inputs)` if any input is tracked.
///
/// `backward(g, needed)` must return one `Some(grad)` per input whose
/// `needed` flag is set (others may be `None` and are skipped). Closures
/// must capture inputs detached.
pub(crate) fn record_op<T: Scalar>(
    op: &'static str,
    inputs: &[&Tensor<T>],
    out: Tensor<T>,
    backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + Send + Sync + 'static,
) -> Tensor<T> {
    let Some(tape) = inputs.iter().find_map(|t| t.node.as_ref().map(|n| n.tape.clone())) else {
        return out;
    };
    let mut parents = Vec::new();
    let mut needed = Vec::with_capacity(inputs.len());
    for t in inputs {
        match &t.node {
            Some(n) => {
                assert!(tape.same_tape(&n.tape), "{op}: inputs belong to different tapes");
                parents.push(n.id);
                needed.push(true);
            }
            None => needed.push(false),
        }
    }
    let nin = inputs.len();
    let wrapped: BackwardFn<T> = Box::new(move |g| {
        let grads = backward(g, &needed);
        assert_eq!(grads.len(), nin, "{op}: backward returned wrong arity");
        grads
            .into_iter()
            .zip(&needed)
            .filter(|(_, &n)| n)
            .map(|(g, _)| g.unwrap_or_else(|| panic!("{op}: missing gradient for tracked input")))
            .collect()
    });
    let id = tape.push(TapeNode { op, parents, backward: wrapped });
    out.with_node(tape, id)
}

// ── Backward pass ───────────────────────────────────────────────────────

/// Gradients keyed by tape node. Leaves the loss never touched read as zero.
pub struct Gradients<T: Scalar> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `t` — zeros if untracked or untouched.
    pub fn wrt(&self, t: &Tensor<T>) -> Tensor<T> {
        t.node
            .as_ref()
            .and_then(|n| self.by_id.get(&n.id).cloned())
            .unwrap_or_else(|| Tensor::zeros(t.shape()))
    }
}

/// Reverse pass from a scalar loss. Gradients are retained for leaves only;
/// interior gradients are freed as soon as their node has been processed.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<Gradients<T>> {
    let node = loss.node.as_ref().ok_or_else(|| Error::Contract {
        op: "backward",
        detail: "loss is not grad-tracked (build it from tape leaves)".into(),
    })?;
    if loss.numel() != 1 {
        return Err(Error::Contract {
            op: "backward",
            detail: format!("loss must be a scalar, got shape {:?}", loss.shape),
        });
    }
    let nodes = node.tape.nodes.lock().unwrap();
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; node.id + 1];
    grads[node.id] = Some(Tensor::full(&loss.shape, T::one()));

    for id in (0..=node.id).rev() {
        let Some(g) = grads[id].take() else { continue };
        let nd = &nodes[id];
        if nd.parents.is_empty() {
            grads[id] = Some(g); // leaf: keep
            continue;
        }
        let parent_grads = (nd.backward)(&g);
        debug_assert_eq!(parent_grads.len(), nd.parents.len(), "{}: arity", nd.op);
        for (&pid, pg) in nd.parents.iter().zip(parent_grads) {
            grads[pid] = Some(match grads[pid].take() {
                Some(acc) => acc.add(&pg),
                None => pg,
            });
        }
    }

    let by_id = grads
        .into_iter()
        .enumerate()
        .filter_map(|(id, g)| g.map(|g| (id, g)))
        .collect();
    Ok(Gradients { by_id })
}

// ── Gradient checking ───────────────────────────────────────────────────

/// Compare analytic gradients of `f` against central differences at every
/// input coordinate; returns the worst relative discrepancy
/// `|a − n| / max(|a|, |n|, 1e-8)`. Run this in f64.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let tape = Tape::new();
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&tracked);
    if loss.numel() != 1 {
        return Err(Error::Contract {
            op: "grad_check",
            detail: format!("f must return a scalar, got shape {:?}", loss.shape()),
        });
    }
    let grads = backward(&loss)?;

    let eval = |xs: &[Tensor<f64>]| f(xs).item();
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tracked[i]);
        for j in 0..input.numel() {
            let base = input.data()[j];
            let bumped = |v: f64| {
                let mut d = input.to_vec();
                d[j] = v;
                Tensor::from_vec(input.shape().to_vec(), d)
            };
            probe[i] = bumped(base + step);
            let up = eval(&probe);
            probe[i] = bumped(base - step);
            let down = eval(&probe);
            probe[i] = input.clone();

            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
