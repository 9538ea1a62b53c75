use super::scalar::{Dual, Scalar};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named trainable tensors flattened into one vector of dimension `P`, with a
/// gradient of the same dimension. Frozen tensors are kept aside and do not
/// count towards `P`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamVector {
    blocks: Vec<ParamBlock>,
    values: Vec<f64>,
    grad: Vec<f64>,
    frozen: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, t: Tensor) -> &mut Self {
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: self.values.len(),
        });
        self.values.extend_from_slice(t.data());
        self.grad.resize(self.values.len(), 0.0);
        self
    }

    pub fn push_frozen(&mut self, name: &str, t: Tensor) -> &mut Self {
        self.frozen.push((name.to_string(), t));
        self
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn frozen(&self, name: &str) -> Option<&Tensor> {
        self.frozen.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn block(&self, name: &str) -> Option<Tensor> {
        let b = self.blocks.iter().find(|b| b.name == name)?;
        Some(self.block_tensor(b))
    }

    fn block_tensor(&self, b: &ParamBlock) -> Tensor {
        Tensor::new(b.shape.clone(), self.values[b.offset..b.offset + b.len()].to_vec())
            .expect("block layout is consistent")
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Overwrite all trainable values from a flat vector of dimension `P`.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.values.len() {
            return Err(Error::Shape {
                context: "unflatten".into(),
                expected: vec![self.values.len()],
                got: vec![flat.len()],
            });
        }
        self.values.copy_from_slice(flat);
        Ok(())
    }

    pub fn with_values(&self, flat: &[f64]) -> Result<ParamVector> {
        let mut p = self.clone();
        p.unflatten(flat)?;
        Ok(p)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.blocks.iter().map(|b| self.block_tensor(b)).collect()
    }

    pub(crate) fn layout(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(|b| (b.offset, b.len())).collect()
    }

    /// Register every block as a trainable leaf on `tape`.
    pub fn register(&self, tape: &mut Tape<f64>) -> Result<Vec<Var>> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| tape.param(i, self.block_tensor(b).with_grad(true)))
            .collect()
    }

    /// Register every block as a dual-valued leaf whose tangent is the matching
    /// slice of `v`.
    pub(crate) fn register_dual(&self, tape: &mut Tape<Dual>, v: &[f64]) -> Result<Vec<Var>> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let data = (b.offset..b.offset + b.len())
                    .map(|k| Dual::new(self.values[k], v[k]))
                    .collect();
                tape.param(i, Tensor::new(b.shape.clone(), data)?.with_grad(true))
            })
            .collect()
    }

    /// Scatter per-block adjoints into a flat vector using primal or tangent parts.
    pub(crate) fn gather<S: Scalar>(&self, grads: &[Option<Tensor<S>>], part: impl Fn(S) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (b, g) in self.blocks.iter().zip(grads) {
            if let Some(g) = g {
                for (o, &x) in out[b.offset..b.offset + b.len()].iter_mut().zip(g.data()) {
                    *o = part(x);
                }
            }
        }
        out
    }
}
