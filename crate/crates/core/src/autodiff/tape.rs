use super::ops::Op;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node<S> {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor<S>,
    /// Parameter block index for trainable leaves.
    param: Option<usize>,
    /// True when a trainable leaf is reachable through the inputs.
    tracked: bool,
}

/// Define-by-run record of primitive applications. Values are computed eagerly
/// and every node's inputs precede it, so a single reverse sweep suffices.
#[derive(Debug)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    consume_once: bool,
    consumed: bool,
    pub(crate) output: Option<Var>,
    pub(crate) layout: Vec<(usize, usize)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consume_once: false,
            consumed: false,
            output: None,
            layout: Vec::new(),
        }
    }

    /// A tape that refuses a second backward sweep.
    pub fn consume_once(mut self) -> Self {
        self.consume_once = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn output(&self) -> Option<Var> {
        self.output
    }

    fn leaf(&mut self, value: Tensor<S>, param: Option<usize>) -> Result<Var> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite { node: id, op: "leaf" });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            param,
            tracked: param.is_some(),
        });
        Ok(Var(id))
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, None)
    }

    pub fn param(&mut self, block: usize, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, Some(block))
    }

    fn push(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let id = self.nodes.len();
        let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.nodes[v.0].value.shape()).collect();
        let shape = op.out_shape(&shapes).ok_or_else(|| Error::Shape {
            context: format!("{} at node {id}", op.name()),
            expected: shapes.first().map(|s| s.to_vec()).unwrap_or_default(),
            got: shapes.get(1).map(|s| s.to_vec()).unwrap_or_default(),
        })?;
        let xs: Vec<&Tensor<S>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = op.forward(&xs, shape);
        if !value.all_finite() {
            return Err(Error::NonFinite { node: id, op: op.name() });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
            param: None,
            tracked,
        });
        Ok(Var(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, &[a, b])
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow, &[a, row])
    }
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow, &[a, row])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(c), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax, &[a])
    }
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm(eps), &[a])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp, &[a])
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softplus, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean, &[a])
    }
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanRows, &[a])
    }
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows(idx), &[a])
    }
    pub fn pick_per_row(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        self.push(Op::PickPerRow(idx), &[a])
    }
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatRows, &[a, b])
    }
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Reshape(shape), &[a])
    }

    /// Inner product of two equally shaped nodes.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        self.sum(m)
    }

    /// First primitive on the tape that has no second derivative.
    pub fn first_non_twice_differentiable(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.tracked && !n.op.twice_differentiable())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse sweep from `out` seeded with `seed`. Returns the adjoint of every
    /// parameter block, indexed by block id (`None` for unreachable blocks).
    pub fn backward_from(&mut self, out: Var, seed: Tensor<S>, n_blocks: usize) -> Result<Vec<Option<Tensor<S>>>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if seed.shape() != self.nodes[out.0].value.shape() {
            return Err(Error::Shape {
                context: "backward seed".into(),
                expected: self.nodes[out.0].value.shape().to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor<S>>> = vec![None; out.0 + 1];
        adj[out.0] = Some(seed);
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; n_blocks];
        for id in (0..=out.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { node: id, op: node.op.name() });
            }
            if let Some(b) = node.param {
                accumulate(&mut grads[b], g);
                continue;
            }
            let xs: Vec<&Tensor<S>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let partials = node.op.vjp(&xs, &node.value, &g);
            for (&i, p) in node.inputs.iter().zip(partials) {
                if self.nodes[i].tracked {
                    accumulate(&mut adj[i], p);
                }
            }
        }
        if self.consume_once {
            self.consumed = true;
        }
        Ok(grads)
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}
