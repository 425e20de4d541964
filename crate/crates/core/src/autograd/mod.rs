//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and a
//! pull-back closure. Nodes are only ever appended, so tape order is a
//! topological order and [`Graph::backward`] walks it once in reverse.
//! Parameters live outside the tape in a [`ParamStore`] and are bound into a
//! graph on first use.

mod gradcheck;
mod ops;
mod optim;
mod params;

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{contract, Result};
use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{finite_diff_grad, max_rel_error, rel_error};
pub use optim::{adamw_step, poly_factor, AdamWState};
pub use params::{load_checkpoint, save_checkpoint, Init, ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Grads<T> = Vec<Option<Tensor<T>>>;
/// Maps the output cotangent to one entry per parent. The mask says which
/// parents need a gradient; entries for the others may be `None`.
type Pullback<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Grads<T>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<Var>,
    pullback: Option<Pullback<T>>,
    requires_grad: bool,
}

pub struct Graph<'s, T: Scalar> {
    store: Option<&'s ParamStore<T>>,
    params_require_grad: bool,
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// A graph with no parameters.
    pub fn detached() -> Self {
        Self {
            store: None,
            params_require_grad: false,
            nodes: RefCell::default(),
            bound: RefCell::default(),
        }
    }

    /// A training graph: bound parameters receive gradients.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            params_require_grad: true,
            nodes: RefCell::default(),
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// An inference graph: parameters are constants, so no pull-backs are
    /// recorded unless some input asks for gradients.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            params_require_grad: false,
            ..Self::new(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn store(&self) -> Result<&'s ParamStore<T>> {
        self.store
            .ok_or_else(|| contract("graph has no parameter store"))
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push_node(&self, value: Arc<Tensor<T>>, parents: Vec<Var>, pullback: Option<Pullback<T>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            pullback,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Input tensor. With `requires_grad` its gradient is reported by
    /// [`Graph::backward`].
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(Arc::new(value), Vec::new(), None, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// The parameter `id`, bound on first use. Repeated calls return the same
    /// node so that shared weights accumulate one gradient.
    pub fn param(&self, id: ParamId) -> Result<Var> {
        let store = self.store()?;
        if let Some(v) = self.bound.borrow()[id.index()] {
            return Ok(v);
        }
        let value = store.shared(id);
        let v = self.push_node(value, Vec::new(), None, self.params_require_grad);
        self.bound.borrow_mut()[id.index()] = Some(v);
        Ok(v)
    }

    /// Appends the result of an op. The pull-back is kept only when some
    /// parent needs a gradient.
    pub(crate) fn push(
        &self,
        value: Tensor<T>,
        parents: &[Var],
        pullback: impl Fn(&Tensor<T>, &[bool]) -> Result<Grads<T>> + 'static,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let pb: Option<Pullback<T>> = requires_grad.then(|| Box::new(pullback) as Pullback<T>);
        self.push_node(Arc::new(value), parents.to_vec(), pb, requires_grad)
    }

    /// Gradient of the scalar `root` with respect to every leaf and bound
    /// parameter that requires one. Contributions are summed in tape order,
    /// so repeated runs give bitwise-identical results.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.backward_keeping(root, &[])
    }

    /// Like [`Graph::backward`], but also returns the gradients reaching the
    /// intermediate values in `keep`.
    pub fn backward_keeping(&self, root: Var, keep: &[Var]) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_val.shape()));
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.pullback.is_some() && keep.iter().any(|k| k.0 == i) {
                leaf_grads[i] = Some(g.clone());
            }
            let Some(pb) = &node.pullback else {
                leaf_grads[i] = Some(g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| nodes[p.0].requires_grad).collect();
            let pgrads = pb(&g, &needs)?;
            if pgrads.len() != node.parents.len() {
                return Err(contract(format!(
                    "pull-back returned {} gradients for {} parents",
                    pgrads.len(),
                    node.parents.len()
                )));
            }
            for (p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !nodes[p.0].requires_grad {
                    continue;
                }
                if pg.shape() != nodes[p.0].value.shape() {
                    return Err(contract(format!(
                        "gradient shape {:?} does not match value shape {:?}",
                        pg.shape(),
                        nodes[p.0].value.shape()
                    )));
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            leaves: leaf_grads,
            bound: self.bound.borrow().clone(),
        })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    bound: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or of a value kept by
    /// [`Graph::backward_keeping`]. `None` when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// Per-parameter gradients in store order; unused parameters get zeros.
    pub fn into_param_grads(mut self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        (0..store.len())
            .map(|i| {
                let id = ParamId::from_index(i);
                self.bound
                    .get(i)
                    .copied()
                    .flatten()
                    .and_then(|v| self.leaves.get_mut(v.0).and_then(Option::take))
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let g = Graph::<f64>::detached();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_gives_twice_x() {
        let g = Graph::<f64>::detached();
        let xv = Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap();
        let x = g.leaf(xv.clone(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &xv.scale(2.0));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let g = Graph::<f64>::detached();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::<f64>::detached();
        let x = g.leaf(Tensor::ones(&[2]), true);
        let c = g.constant(Tensor::ones(&[2]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(c).is_none());
        assert!(grads.wrt(x).is_some());
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::<f64>::new(0);
        let w = store.add("w", Tensor::full(&[1], 3.0)).unwrap();
        let g = Graph::new(&store);
        let a = g.param(w).unwrap();
        let b = g.param(w).unwrap();
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(w).unwrap().item(), 6.0);
    }
}
