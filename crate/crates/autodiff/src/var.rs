//! Graph nodes and the reverse-mode sweep.
//!
//! Every backward rule is written in terms of [`Var`] operations, so when
//! [`grad`] is called with `create_graph = true` the returned gradients are
//! themselves differentiable. This is what makes gradient penalties (a loss
//! on the norm of an input gradient) trainable.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub type Tensor = ArrayD<f64>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) type BackwardFn = Box<dyn Fn(&[Var], &Var, &Var) -> Vec<Option<Var>>>;

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: &'static str,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// A tensor value that remembers how it was computed.
#[derive(Clone)]
pub struct Var(Rc<Node>);

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether operations currently record their parents.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with graph recording switched on or off, restoring the previous mode.
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

impl Var {
    fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op: "leaf",
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf that gradients flow into.
    pub fn param(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::constant(ArrayD::ones(IxDyn(shape)))
    }

    pub(crate) fn from_op(
        value: Tensor,
        op: &'static str,
        parents: Vec<Var>,
        backward: impl Fn(&[Var], &Var, &Var) -> Vec<Option<Var>> + 'static,
    ) -> Self {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op,
            parents,
            backward: Some(Box::new(backward)),
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn into_value(self) -> Tensor {
        match Rc::try_unwrap(self.0) {
            Ok(node) => node.value,
            Err(rc) => rc.value.clone(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op(&self) -> &'static str {
        self.0.op
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// First element as a scalar; intended for losses.
    pub fn item(&self) -> f64 {
        *self.0.value.iter().next().expect("item() on empty tensor")
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.op)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Gradients of `output` (summed over all its elements) with respect to `wrt`.
///
/// With `create_graph` the result is part of the graph and can be
/// differentiated again. Inputs that `output` does not depend on get zeros.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    let seed = Var::ones(output.shape());
    grad_with_seed(output, seed, wrt, create_graph)
}

/// Vector-Jacobian product of `output` against `seed`.
pub fn grad_with_seed(output: &Var, seed: Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(
        output.shape(),
        seed.shape(),
        "seed shape must match output shape"
    );
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        for p in &v.0.parents {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push(p.clone());
            }
        }
        order.push(v);
    }
    // parents always carry smaller ids than their children
    order.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

    let keep: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();
    let mut grads: HashMap<u64, Var> = HashMap::new();
    grads.insert(output.id(), seed);

    with_grad_mode(create_graph, || {
        for node in &order {
            let Some(backward) = &node.0.backward else {
                continue;
            };
            let g = if keep.contains(&node.id()) {
                grads.get(&node.id()).cloned()
            } else {
                grads.remove(&node.id())
            };
            let Some(g) = g else { continue };
            let parent_grads = backward(&node.0.parents, node, &g);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len(), "{}", node.op());
            for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.shape(), p.shape(), "gradient shape from {}", node.op());
                let merged = match grads.remove(&p.id()) {
                    Some(acc) => acc.add(&pg),
                    None => pg,
                };
                grads.insert(p.id(), merged);
            }
        }
    });

    wrt.iter()
        .map(|v| {
            grads
                .get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::zeros(v.shape()))
        })
        .collect()
}

/// Plain gradient arrays, no graph kept.
pub fn grad_values(output: &Var, wrt: &[&Var]) -> Vec<Tensor> {
    grad(output, wrt, false)
        .into_iter()
        .map(Var::into_value)
        .collect()
}
