//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. [`Tape::backward`] walks the record once in reverse and returns
//! the gradient of a single-element root with respect to every node.
//!
//! Nodes that do not depend on any parameter leaf carry no backward rule,
//! so image preprocessing on constants costs nothing during the reverse
//! pass.

mod conv;
mod ops;
mod tensor;

use std::cell::RefCell;
use std::rc::Rc;

pub use conv::{gemm, StencilKernel};
pub use ops::DivPolicy;
pub use tensor::Tensor;

use crate::error::{Error, Result};

pub type NodeId = usize;

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Write access to gradient buffers during the reverse pass.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl GradSink<'_> {
    /// Whether `id` needs a gradient at all.
    pub fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Accumulate into the gradient buffer of `id`, allocating it on first use.
    pub fn accumulate(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let len = self.nodes[id].value.len();
        let buf = self.grads[id].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    pub fn add(&mut self, id: NodeId, g: &[f64]) {
        self.accumulate(id, |buf| {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        });
    }
}

/// Gradients of a scalar root with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the root does not depend on it.
    pub fn wrt(&self, var: &Var) -> Tensor {
        self.by_id(var.id)
    }

    pub fn by_id(&self, id: NodeId) -> Tensor {
        let shape = self.shapes[id].clone();
        match &self.grads[id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_connected(&self, var: &Var) -> bool {
        self.grads[var.id].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push_node(Node {
            shape,
            value: Rc::new(t.into_data()),
            requires_grad: true,
            backward: None,
        })
    }

    /// Leaf treated as data; no gradient flows into it.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push_node(Node {
            shape,
            value: Rc::new(t.into_data()),
            requires_grad: false,
            backward: None,
        })
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Record an operation computed outside this module.
    ///
    /// `backward` receives the gradient of the output and must accumulate
    /// input gradients through the sink. It is dropped unless some input
    /// requires a gradient.
    pub fn record(
        &self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        backward: impl Fn(&[f64], &mut GradSink) + 'static,
    ) -> Var<'_> {
        self.record_rc(inputs, shape, Rc::new(value), backward)
    }

    /// Like [`Tape::record`] for a value the backward rule also holds on to.
    pub fn record_rc(
        &self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Rc<Vec<f64>>,
        backward: impl Fn(&[f64], &mut GradSink) + 'static,
    ) -> Var<'_> {
        debug_assert_eq!(tensor::numel(&shape), value.len());
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "mixing tapes");
                nodes[v.id].requires_grad
            })
        };
        self.push_node(Node {
            shape,
            value,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root_node.requires_grad {
            grads[root.id] = Some(vec![1.0]);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(bw) = &nodes[id].backward {
                let mut sink = GradSink {
                    grads: &mut grads,
                    nodes: &nodes,
                };
                bw(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.as_ref().clone()).expect("node shape")
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        v[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = x.mul(&x).unwrap().sum();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.wrt(&x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let z = tape.param(Tensor::from_vec(vec![5.0, 6.0, 7.0]));
        let y = x.exp().sum();
        let g = tape.backward(&y).unwrap();
        assert!(!g.is_connected(&z));
        assert_eq!(g.wrt(&z).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn two_paths_accumulate() {
        // y = x*3 + x*x at x=2: dy/dx = 3 + 4
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let a = x.mul_scalar(3.0);
        let b = x.mul(&x).unwrap();
        let y = a.add(&b).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.wrt(&x).data(), &[7.0]);
    }

    #[test]
    fn constants_carry_no_backward() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let d = c.exp();
        assert!(!d.requires_grad());
        let root = d.sum();
        let g = tape.backward(&root).unwrap();
        assert!(!g.is_connected(&c));
    }
}
