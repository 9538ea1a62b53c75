//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Hessian-vector products are forward-over-reverse: the program is rebuilt on
//! [`Dual`] numbers whose tangent is `v`, and the reverse sweep then yields
//! `∇f` in the primal parts and `H·v` in the tangent parts.

mod ops;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use ops::Op;
pub(crate) use ops::{sigmoid, softplus};
pub use params::{ParamBlock, ParamVector};
pub use scalar::{Dual, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// A differentiable program: builds its computation on a tape given the
/// registered parameter blocks and a constant input.
pub trait Program {
    /// Expected input shape, when the program has a fixed signature.
    fn input_shape(&self) -> Option<Vec<usize>> {
        None
    }

    fn build<S: Scalar>(&self, tape: &mut Tape<S>, params: &[Var], input: &Tensor) -> Result<Var>;
}

fn check_input<P: Program>(program: &P, input: &Tensor) -> Result<()> {
    match program.input_shape() {
        Some(s) if s != input.shape() => Err(Error::Shape {
            context: "program input".into(),
            expected: s,
            got: input.shape().to_vec(),
        }),
        _ => Ok(()),
    }
}

/// Evaluate `program` and return its output together with a replayable tape.
pub fn forward<P: Program>(program: &P, params: &ParamVector, input: &Tensor) -> Result<(Tensor, Tape<f64>)> {
    check_input(program, input)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape)?;
    let out = program.build(&mut tape, &vars, input)?;
    tape.output = Some(out);
    tape.layout = params.layout();
    Ok((tape.value(out).clone(), tape))
}

/// Gradient of the tape output (contracted with `seed`) w.r.t. every trainable
/// parameter, flattened to dimension `P`.
pub fn backward(tape: &mut Tape<f64>, seed: &Tensor) -> Result<Vec<f64>> {
    let out = tape.output.ok_or_else(|| Error::Invalid("tape has no output".into()))?;
    let layout = tape.layout.clone();
    let grads = tape.backward_from(out, seed.clone(), layout.len())?;
    let dim = layout.iter().map(|(o, l)| o + l).max().unwrap_or(0);
    let mut flat = vec![0.0; dim];
    for ((off, len), g) in layout.iter().zip(&grads) {
        if let Some(g) = g {
            flat[*off..off + len].copy_from_slice(g.data());
        }
    }
    Ok(flat)
}

/// Value and gradient of a scalar program.
pub fn value_and_grad<P: Program>(program: &P, params: &ParamVector, input: &Tensor) -> Result<(f64, Vec<f64>)> {
    let (out, mut tape) = forward(program, params, input)?;
    if !out.shape().is_empty() {
        return Err(Error::Shape {
            context: "value_and_grad expects a scalar output".into(),
            expected: vec![],
            got: out.shape().to_vec(),
        });
    }
    let g = backward(&mut tape, &Tensor::scalar(1.0))?;
    Ok((out.item(), g))
}

/// Exact Hessian-vector product of a scalar program.
pub fn hvp<P: Program>(program: &P, params: &ParamVector, input: &Tensor, v: &[f64]) -> Result<Vec<f64>> {
    Ok(grad_and_hvp(program, params, input, v)?.1)
}

/// Gradient and Hessian-vector product from one dual-number sweep.
pub fn grad_and_hvp<P: Program>(
    program: &P,
    params: &ParamVector,
    input: &Tensor,
    v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_input(program, input)?;
    if v.len() != params.dim() {
        return Err(Error::Shape {
            context: "hvp direction".into(),
            expected: vec![params.dim()],
            got: vec![v.len()],
        });
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::Invalid("hvp direction must be nonzero".into()));
    }
    let mut tape: Tape<Dual> = Tape::new();
    let vars = params.register_dual(&mut tape, v)?;
    let out = program.build(&mut tape, &vars, input)?;
    if let Some((node, op)) = tape.first_non_twice_differentiable() {
        return Err(Error::NotTwiceDifferentiable { node, op });
    }
    if !tape.value(out).shape().is_empty() {
        return Err(Error::Invalid("hvp requires a scalar program".into()));
    }
    let grads = tape.backward_from(out, Tensor::scalar(Dual::new(1.0, 0.0)), params.blocks().len())?;
    Ok((params.gather(&grads, |d| d.v), params.gather(&grads, |d| d.t)))
}

/// Dense Hessian assembled column by column from HVPs with basis vectors.
pub fn dense_hessian<P: Program>(program: &P, params: &ParamVector, input: &Tensor) -> Result<Vec<Vec<f64>>> {
    let p = params.dim();
    let mut cols = Vec::with_capacity(p);
    for j in 0..p {
        let mut e = vec![0.0; p];
        e[j] = 1.0;
        cols.push(hvp(program, params, input, &e)?);
    }
    // Columns of a symmetric matrix are its rows.
    Ok(cols)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    /// Normwise relative error, or absolute error when `absolute` is set.
    pub error: f64,
    pub absolute: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
    pub max_error: f64,
}

/// Scale below which a block's gradient counts as zero and the absolute error
/// is reported instead of the relative one.
const ZERO_GRAD_SCALE: f64 = 1e-9;

/// Compare reverse-mode gradients against central differences, block by block.
/// The per-block error is `max|a−n| / max(|a|,|n|)` over the block.
pub fn grad_check<P: Program>(program: &P, params: &ParamVector, input: &Tensor, step: f64) -> Result<GradCheckReport> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::Invalid(format!("grad_check step {step} outside (0, 1e-2]")));
    }
    let (_, analytic) = value_and_grad(program, params, input)?;
    let scalar_at = |w: &[f64]| -> Result<f64> {
        let p = params.with_values(w)?;
        let (out, _) = forward(program, &p, input)?;
        Ok(out.item())
    };
    let base = params.flatten();
    let mut blocks = Vec::with_capacity(params.blocks().len());
    for b in params.blocks() {
        let mut max_diff = 0.0f64;
        let mut scale = 0.0f64;
        for k in b.offset..b.offset + b.len() {
            let mut w = base.clone();
            w[k] = base[k] + step;
            let up = scalar_at(&w)?;
            w[k] = base[k] - step;
            let down = scalar_at(&w)?;
            let numeric = (up - down) / (2.0 * step);
            max_diff = max_diff.max((analytic[k] - numeric).abs());
            scale = scale.max(analytic[k].abs()).max(numeric.abs());
        }
        let absolute = scale < ZERO_GRAD_SCALE;
        blocks.push(BlockError {
            name: b.name.clone(),
            error: if absolute { max_diff } else { max_diff / scale },
            absolute,
        });
    }
    let max_error = blocks.iter().map(|b| b.error).fold(0.0, f64::max);
    Ok(GradCheckReport { blocks, max_error })
}
