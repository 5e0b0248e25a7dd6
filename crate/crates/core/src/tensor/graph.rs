use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) id: usize,
    graph: u64,
}

/// Everything a backward closure may look at.
pub struct BackwardArgs<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    /// Gradient of the loss with respect to `output`.
    pub grad: &'a [f64],
    /// Whether each input wants a gradient; closures may skip the others.
    pub needs: &'a [bool],
}

/// Returns one gradient buffer per input (`None` where not needed).
pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Option<Tensor>,
}

/// Append-only tape of operations.
///
/// Node ids follow append order, so every input of a node has a smaller id
/// than the node itself and reverse append order is a valid topological
/// order for backward.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grad_enabled: bool,
    bound: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_enabled: true,
            bound: HashMap::new(),
        }
    }

    /// A graph that records no backward closures; used for evaluation.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(value, rg, None)
    }

    /// Binds a stored parameter into the graph. Binding the same parameter
    /// twice returns the same variable, so every use shares one node. A graph
    /// should only ever see one store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let rg = self.grad_enabled;
        let v = self.push_leaf(store.value(id).clone(), rg, Some(id));
        self.bound.insert(id, v);
        v
    }

    /// Variable a parameter is bound to, if it has been bound.
    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, inputs: Vec::new(), backward: None, requires_grad, param, grad: None });
        Var { id, graph: self.id }
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(TensorError::DetachedTensor);
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Accumulated gradient of a leaf, present after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.id].grad.as_ref()
    }

    /// Appends an op node. The output must be finite; `backward` is dropped
    /// when no input requires a gradient.
    pub fn push_op(&mut self, op: &'static str, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            inputs: if requires_grad { inputs.to_vec() } else { Vec::new() },
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
            grad: None,
        });
        Ok(Var { id, graph: self.id })
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate:
    /// running backward twice without [`Graph::zero_grads`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let shape = self.nodes[loss.id].value.shape();
        if self.nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let n = loss.id + 1;
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; n];
        adjoint[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..n).rev() {
            let Some(gout) = adjoint[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                leaf_grads.push((i, gout));
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.id].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.id].requires_grad).collect();
            let grads = backward(&BackwardArgs { inputs: &inputs, output: &node.value, grad: &gout, needs: &needs });
            debug_assert_eq!(grads.len(), node.inputs.len());
            for ((input, grad), need) in node.inputs.iter().zip(grads).zip(needs) {
                let Some(grad) = grad else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(grad.len(), self.nodes[input.id].value.numel());
                match &mut adjoint[input.id] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        for (i, g) in leaf_grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Adds the leaf gradients of bound parameters into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.param, &node.grad) {
                store.add_grad(id, g.data());
            }
        }
    }
}
