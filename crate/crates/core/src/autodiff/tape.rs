use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
    EdgeAggregate {
        theta: Var,
        x: Var,
        adj: Arc<Adjacency>,
        d_in: usize,
        d_out: usize,
    },
    FactoredEdgeConv {
        hidden: Var,
        w_last: Var,
        b_last: Var,
        x: Var,
        adj: Arc<Adjacency>,
        d_in: usize,
        d_out: usize,
        /// Per source node: `(m + 1) × d_out` responses of each filter basis.
        responses: Vec<f64>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
        cols: usize,
    },
    SegmentMean {
        x: Var,
        assignment: Arc<Vec<usize>>,
        counts: Vec<usize>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Records the forward computation so gradients can be replayed in reverse.
///
/// Nodes are appended in execution order, so the tape is topologically
/// sorted by construction. `backward` may run once per tape.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, ParamId)>,
    backward_done: bool,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            backward_done: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enable or disable the per-op NaN/inf scan (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a parameter as a gradient-carrying leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.requires_grad);
        self.params.push((v, id));
        v
    }

    /// Register every parameter of `store` in order.
    pub fn params(&mut self, store: &ParamStore) -> Vec<Var> {
        (0..store.len()).map(|i| self.param(store, ParamId(i))).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if self.check_finite {
            if let Some(index) = value.first_non_finite() {
                return Err(Error::NonFinite { op: name, index });
            }
        }
        let requires_grad = op_inputs(&op)
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradient of the last `backward` target with respect to `v`.
    /// `None` if `v` was not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Tape::grad`] but unreached values get an all-zero gradient.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    /// Copy gradients of registered parameters into `store`.
    /// Parameters not on any path to the loss receive zeros.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for &(v, id) in &self.params {
            store.get_mut(id).grad = Some(self.grad_or_zeros(v));
        }
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::StaleTape);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        if self.check_finite {
            for g in self.grads.iter().flatten() {
                if let Some(index) = g.first_non_finite() {
                    return Err(Error::NonFinite {
                        op: "backward",
                        index,
                    });
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::Relu { x }
        | Op::Sum { x }
        | Op::Dropout { x, .. }
        | Op::SegmentMax { x, .. }
        | Op::SegmentMean { x, .. } => vec![*x],
        Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::AddBias { x, b } => vec![*x, *b],
        Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
            vec![*x, *gamma, *beta]
        }
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        Op::EdgeAggregate { theta, x, .. } => vec![*theta, *x],
        Op::FactoredEdgeConv {
            hidden,
            w_last,
            b_last,
            x,
            ..
        } => vec![*hidden, *w_last, *b_last, *x],
    }
}
