use std::collections::{BTreeMap, HashMap};

use ndarray::{ArrayD, IxDyn};

use crate::store::ParamStore;

/// Handle to a node on the tape. Cheap to copy; only valid for the graph
/// that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

/// Gradient contributions a backward closure hands back: (parent id, grad).
pub(crate) type GradPairs = Vec<(usize, ArrayD<f32>)>;

/// Backward closure: (upstream gradient, all nodes for value access) -> parent grads.
pub(crate) type BackwardFn = Box<dyn Fn(&ArrayD<f32>, &[Node]) -> GradPairs>;

pub(crate) struct Node {
    pub(crate) value: ArrayD<f32>,
    pub(crate) requires_grad: bool,
    pub(crate) backward: Option<BackwardFn>,
    pub(crate) param_name: Option<String>,
}

/// A single forward pass. Rebuilt for every training step; dropped afterwards.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Leaf with no gradient (inputs, frozen encoder outputs, masks).
    pub fn constant(&mut self, value: ArrayD<f32>) -> Tensor {
        self.push_leaf(value, false, None)
    }

    /// Leaf that accumulates a gradient but is not a named parameter.
    /// Used by gradient checks.
    pub fn leaf(&mut self, value: ArrayD<f32>) -> Tensor {
        self.push_leaf(value, true, None)
    }

    /// Leaf bound to a named parameter in `store`. Its gradient lands in
    /// [`Gradients::into_param_grads`] under the same name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Tensor {
        let value = store.param(name).clone();
        self.push_leaf(value, true, Some(name.to_string()))
    }

    fn push_leaf(
        &mut self,
        value: ArrayD<f32>,
        requires_grad: bool,
        param_name: Option<String>,
    ) -> Tensor {
        self.nodes.push(Node {
            value: standardized(value),
            requires_grad,
            backward: None,
            param_name,
        });
        Tensor {
            id: self.nodes.len() - 1,
        }
    }

    pub(crate) fn push_op(
        &mut self,
        value: ArrayD<f32>,
        parents: &[Tensor],
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| self.nodes[p.id].requires_grad);
        self.nodes.push(Node {
            value: standardized(value),
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
            param_name: None,
        });
        Tensor {
            id: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, t: Tensor) -> &ArrayD<f32> {
        &self.nodes[t.id].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.id].value.shape()
    }

    pub fn scalar(&self, t: Tensor) -> f32 {
        debug_assert!(self.nodes[t.id].value.len() == 1);
        self.nodes[t.id].value.iter().copied().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse pass from a scalar root. Nodes are created in topological
    /// order, so a reverse index walk visits children before parents.
    /// Intermediate gradients are dropped as soon as they are consumed;
    /// leaf gradients are kept.
    pub fn backward(&self, root: Tensor) -> Gradients {
        assert!(
            self.nodes[root.id].value.len() == 1,
            "backward root must be scalar, got shape {:?}",
            self.nodes[root.id].value.shape()
        );
        let mut grads: Vec<Option<ArrayD<f32>>> = Vec::with_capacity(root.id + 1);
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(ArrayD::ones(self.nodes[root.id].value.raw_dim()));

        let mut out = Gradients {
            leaves: HashMap::new(),
            params: BTreeMap::new(),
        };

        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Some(bw) = &self.nodes[id].backward {
                for (pid, pg) in bw(&grad, &self.nodes) {
                    debug_assert!(pid < id, "backward produced a non-parent gradient");
                    if !self.nodes[pid].requires_grad {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            } else {
                // Leaf: keep the gradient.
                if let Some(name) = &self.nodes[id].param_name {
                    match out.params.get_mut(name) {
                        Some(acc) => *acc += &grad,
                        None => {
                            out.params.insert(name.clone(), grad.clone());
                        }
                    }
                }
                out.leaves.insert(id, grad);
            }
        }
        out
    }
}

/// Gradients collected by [`Graph::backward`].
pub struct Gradients {
    leaves: HashMap<usize, ArrayD<f32>>,
    params: BTreeMap<String, ArrayD<f32>>,
}

impl Gradients {
    pub fn wrt(&self, t: Tensor) -> Option<&ArrayD<f32>> {
        self.leaves.get(&t.id)
    }

    pub fn param(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.params.get(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn into_param_grads(self) -> BTreeMap<String, ArrayD<f32>> {
        self.params
    }
}

/// Shorthand used across the op modules.
pub(crate) fn dyn_shape(shape: &[usize]) -> IxDyn {
    IxDyn(shape)
}
