use std::collections::{BTreeMap, HashMap};

use crate::error::{invalid, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Backward rule of a recorded operation.
///
/// Called with the upstream gradient, the parent values, the node's own
/// value, and a flag per parent telling whether that parent needs a
/// gradient. Returns one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Whether normalization layers use batch statistics or frozen running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape of operations recorded during one forward pass.
///
/// Nodes are appended in execution order, so reverse insertion order is a
/// valid topological order for the backward sweep.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    mode: Mode,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Mode::Train)
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Leaf bound to a named trainable parameter. Repeated lookups of the
    /// same name return the same node, so shared weights accumulate a single
    /// gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.variable(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents = parents.iter().map(|p| p.0).collect();
        self.push(value, parents, Some(backward), requires_grad)
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let seed = Tensor::full(self.value(output).shape(), 1.0);
        if seed.numel() != 1 {
            return Err(invalid(
                "backward",
                format!("output must be scalar, got shape {:?}", seed.shape()),
            ));
        }
        self.backward_with(output, seed)
    }

    /// Reverse sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.value(output).expect_shape("backward", seed.shape())?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &inputs, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // Interior gradients are not needed after propagation.
            grads[idx] = None;
        }
        Ok(Gradients {
            grads,
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter bound through [`Graph::param`], keyed by
    /// name. Parameters that did not influence the output get zeros.
    pub fn params(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, v)| {
                let g = match self.get(*v) {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(store.get(name).ok()?.shape()),
                };
                Some((name.clone(), g))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_param_accumulates_once() {
        let mut store = ParamStore::default();
        store.insert("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::default();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        let pg = grads.params(&store);
        assert_eq!(pg["w"].data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::default();
        let c = g.constant(Tensor::ones(&[3]));
        let x = g.variable(Tensor::ones(&[3]));
        let y = g.mul(c, x).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::default();
        let x = g.variable(Tensor::ones(&[3]));
        let y = g.exp(x);
        assert!(g.backward(y).is_err());
    }
}
