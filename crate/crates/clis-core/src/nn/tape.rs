//! The tape: node storage and the reverse pass.

use std::cell::RefCell;

use ndarray::{ArrayD, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward closure: `(grad_of_output, parent_values) -> per-parent grads`.
pub(crate) type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>]) -> Vec<ArrayD<f64>>>;

pub(crate) struct Node {
    pub value: ArrayD<f64>,
    pub parents: Vec<usize>,
    pub backward: Option<BackwardFn>,
}

/// Append-only computation graph for one forward/backward cycle.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes currently recorded.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf node: no parents, no backward. Gradients accumulate here and
    /// can be read back after [`Tape::backward`].
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Scalar leaf (0-d).
    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<f64>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Clone out a node's value.
    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a 0-d node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    /// Reverse pass from a scalar root. Seeds the root gradient with 1 and
    /// accumulates into every ancestor; leaves keep their gradient so callers
    /// can read parameter grads out of the returned [`Gradients`].
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            let Some(back) = &node.backward else { continue };
            // Take the grad for the interior node; contributions below only
            // flow to parents, so it is not needed again unless requested,
            // in which case `Gradients::get` would miss it. Interior grads
            // are rarely read, so move rather than clone.
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let parent_values: Vec<&ArrayD<f64>> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let contributions = back(&upstream, &parent_values);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (&p, c) in node.parents.iter().zip(contributions) {
                match &mut grads[p] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
            grads[i] = Some(upstream);
        }

        Gradients { grads }
    }
}

/// Result of a reverse pass. Indexable by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient accumulated at `v`, if the root depends on it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
