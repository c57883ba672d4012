//! A reverse-mode autodiff tape over the tensor kernels.
//!
//! Every operation appends one node holding its output value, its parent
//! node ids, and a closure computing parent gradients from the output
//! gradient. [`Graph::backward`] walks nodes in reverse insertion order
//! (which is reverse topological order, since parents always precede
//! children) and accumulates gradients in that fixed order, so repeated runs
//! produce bit-identical results.

use super::ops;
use super::{Tensor4, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Computes parent gradients from the node's output gradient and the parent
/// values, in parent order.
pub type BackwardFn = Box<dyn Fn(&Tensor4, &[&Tensor4]) -> Vec<Tensor4>>;

struct Node {
    value: Tensor4,
    grad: Option<Tensor4>,
    parents: Vec<VarId>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input node. Leaves have no backward function; their
    /// gradients are whatever accumulates during the backward pass.
    pub fn leaf(&mut self, value: Tensor4) -> VarId {
        self.push(value, Vec::new(), None)
    }

    /// Inserts a node with an arbitrary hand-written backward rule. This is
    /// the escape hatch for composite operations (like the detection loss)
    /// that compute their value outside the tape.
    pub fn custom(&mut self, value: Tensor4, parents: Vec<VarId>, backward: BackwardFn) -> VarId {
        for p in &parents {
            assert!(p.0 < self.nodes.len(), "custom node parent is not in this graph");
        }
        self.push(value, parents, Some(backward))
    }

    fn push(&mut self, value: Tensor4, parents: Vec<VarId>, backward: Option<BackwardFn>) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            parents,
            backward,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Tensor4 {
        &self.nodes[id.0].value
    }

    /// The gradient accumulated at `id` by the last [`Graph::backward`] call,
    /// if any reached it.
    pub fn grad(&self, id: VarId) -> Option<&Tensor4> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        weight: VarId,
        bias: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId, TensorError> {
        let out = ops::conv2d_parts(
            self.value(x),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        let backward: BackwardFn = Box::new(move |go, pv| {
            let (x, w) = (pv[0], pv[1]);
            vec![
                ops::conv2d_grad_x(w, go, x.shape(), stride, padding),
                ops::conv2d_grad_w(x, go, w.shape(), stride, padding),
                ops::conv2d_grad_b(go),
            ]
        });
        Ok(self.push(out, vec![x, weight, bias], Some(backward)))
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> Result<VarId, TensorError> {
        let out = ops::leaky_relu(self.value(x), slope)?;
        let backward: BackwardFn =
            Box::new(move |go, pv| vec![ops::leaky_relu_backward(pv[0], slope, go)]);
        Ok(self.push(out, vec![x], Some(backward)))
    }

    pub fn maxpool2(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let (out, record) = ops::maxpool2(self.value(x))?;
        let backward: BackwardFn = Box::new(move |go, _| vec![ops::maxpool2_backward(&record, go)]);
        Ok(self.push(out, vec![x], Some(backward)))
    }

    pub fn upsample_nearest2(&mut self, x: VarId) -> VarId {
        let out = ops::upsample_nearest2(self.value(x));
        let backward: BackwardFn = Box::new(|go, _| {
            vec![ops::upsample_nearest2_backward(go)
                .expect("upsample output always has even spatial dims")]
        });
        self.push(out, vec![x], Some(backward))
    }

    pub fn space_to_depth2(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let out = ops::space_to_depth2(self.value(x))?;
        // The op is a permutation; its adjoint is the inverse permutation.
        let backward: BackwardFn = Box::new(|go, _| {
            vec![ops::depth_to_space2(go).expect("adjoint of a valid space_to_depth2")]
        });
        Ok(self.push(out, vec![x], Some(backward)))
    }

    pub fn depth_to_space2(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let out = ops::depth_to_space2(self.value(x))?;
        let backward: BackwardFn = Box::new(|go, _| {
            vec![ops::space_to_depth2(go).expect("adjoint of a valid depth_to_space2")]
        });
        Ok(self.push(out, vec![x], Some(backward)))
    }

    pub fn space_to_depth_w2(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let out = ops::space_to_depth_w2(self.value(x))?;
        let backward: BackwardFn = Box::new(|go, _| {
            vec![ops::depth_to_space_w2(go).expect("adjoint of a valid space_to_depth_w2")]
        });
        Ok(self.push(out, vec![x], Some(backward)))
    }

    pub fn concat_channels(&mut self, xs: &[VarId]) -> Result<VarId, TensorError> {
        let values: Vec<&Tensor4> = xs.iter().map(|&id| self.value(id)).collect();
        let out = ops::concat_channels(&values)?;
        let part_channels: Vec<usize> = values.iter().map(|t| t.shape().c).collect();
        let backward: BackwardFn =
            Box::new(move |go, _| ops::concat_channels_backward(go, &part_channels));
        Ok(self.push(out, xs.to_vec(), Some(backward)))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let out = ops::add(self.value(a), self.value(b))?;
        let backward: BackwardFn = Box::new(|go, _| vec![go.clone(), go.clone()]);
        Ok(self.push(out, vec![a, b], Some(backward)))
    }

    /// Seeds the root gradient with all ones (the gradient of "sum of all
    /// outputs") and runs the backward pass.
    pub fn backward_ones(&mut self, root: VarId) -> Result<(), TensorError> {
        let seed = Tensor4::filled(self.value(root).shape(), 1.0);
        self.backward(root, seed)
    }

    /// Propagates `seed` (dL/d root) back to every node that feeds `root`.
    pub fn backward(&mut self, root: VarId, seed: Tensor4) -> Result<(), TensorError> {
        let root_shape = self.value(root).shape();
        if seed.shape() != root_shape {
            return Err(TensorError::ShapeMismatch {
                left: root_shape,
                right: seed.shape(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(seed);

        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let (Some(go), Some(backward)) = (&node.grad, &node.backward) else {
                continue;
            };
            let parent_values: Vec<&Tensor4> =
                node.parents.iter().map(|p| &before[p.0].value).collect();
            let parent_grads = backward(go, &parent_values);
            assert_eq!(
                parent_grads.len(),
                node.parents.len(),
                "backward rule returned a gradient per parent"
            );
            let parents = node.parents.clone();
            for (p, g) in parents.into_iter().zip(parent_grads) {
                let slot = &mut before[p.0].grad;
                match slot {
                    Some(existing) => existing
                        .add_assign(&g)
                        .expect("adjoint gradients always match the parent value shape"),
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
