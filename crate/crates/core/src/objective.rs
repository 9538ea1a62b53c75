//! Empirical-risk objectives over indexed samples. Optimizers and diagnostics
//! only see this interface: per-sample gradients, mini-batch gradients and
//! Hessian-vector products at a flat parameter vector.

use crate::autodiff::{self, ParamVector, Program, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg::{dot, SymMatrix};

pub trait Objective: Sync {
    /// Parameter dimension `P`.
    fn dim(&self) -> usize;

    /// Number of samples.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean loss and mean gradient over `idx`.
    fn loss_grad(&self, w: &[f64], idx: &[usize]) -> Result<(f64, Vec<f64>)>;

    fn loss(&self, w: &[f64], idx: &[usize]) -> Result<f64> {
        Ok(self.loss_grad(w, idx)?.0)
    }

    fn per_sample_grads(&self, w: &[f64], idx: &[usize]) -> Result<Vec<Vec<f64>>>;

    /// Hessian of the mean loss over `idx` applied to `v`.
    fn hvp(&self, w: &[f64], idx: &[usize], v: &[f64]) -> Result<Vec<f64>>;

    /// Dense Hessian of the mean loss over `idx`.
    fn hessian(&self, w: &[f64], idx: &[usize]) -> Result<SymMatrix> {
        let p = self.dim();
        let mut rows = Vec::with_capacity(p);
        for j in 0..p {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            rows.push(self.hvp(w, idx, &e)?);
        }
        SymMatrix::from_rows(&rows)
    }

    /// Binary labels, when the objective is a classifier.
    fn labels(&self) -> Option<&[u8]> {
        None
    }

    fn all(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

fn check_idx(idx: &[usize], len: usize) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if let Some(&i) = idx.iter().find(|&&i| i >= len) {
        return Err(Error::Invalid(format!("sample index {i} out of range ({len})")));
    }
    Ok(())
}

fn check_w(w: &[f64], dim: usize) -> Result<()> {
    if w.len() != dim {
        return Err(Error::Shape {
            context: "parameter vector".into(),
            expected: vec![dim],
            got: vec![w.len()],
        });
    }
    Ok(())
}

/// Binary logistic regression on fixed features; parameters are
/// `[weight.., bias]`, so `P = F + 1`. Gradients and curvature are closed-form.
#[derive(Debug, Clone)]
pub struct LogisticObjective {
    /// Rows `[x.., 1]`.
    rows: Vec<Vec<f64>>,
    labels: Vec<u8>,
}

impl LogisticObjective {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::Invalid("features and labels must be nonempty and aligned".into()));
        }
        let f = features[0].len();
        if features.iter().any(|r| r.len() != f) {
            return Err(Error::Invalid("ragged feature rows".into()));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::Invalid("labels must be 0 or 1".into()));
        }
        let rows = features
            .into_iter()
            .map(|mut r| {
                r.push(1.0);
                r
            })
            .collect();
        Ok(LogisticObjective { rows, labels })
    }

    pub fn feature_dim(&self) -> usize {
        self.rows[0].len() - 1
    }

    /// Logits of every sample.
    pub fn scores(&self, w: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| dot(r, w)).collect()
    }

    fn residual(&self, w: &[f64], i: usize) -> (f64, f64) {
        let z = dot(&self.rows[i], w);
        let y = f64::from(self.labels[i]);
        let loss = autodiff::softplus(z) - y * z;
        (loss, autodiff::sigmoid(z) - y)
    }

    /// Closed-form Hessian `mean σ(1−σ) x̃x̃ᵀ`.
    pub fn dense_hessian(&self, w: &[f64], idx: &[usize]) -> Result<SymMatrix> {
        check_w(w, self.dim())?;
        check_idx(idx, self.len())?;
        let mut h = SymMatrix::zeros(self.dim());
        for &i in idx {
            let s = autodiff::sigmoid(dot(&self.rows[i], w));
            h.rank_one_update(s * (1.0 - s), &self.rows[i]);
        }
        h.scale(1.0 / idx.len() as f64);
        Ok(h)
    }
}

impl Objective for LogisticObjective {
    fn dim(&self) -> usize {
        self.rows[0].len()
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    fn loss_grad(&self, w: &[f64], idx: &[usize]) -> Result<(f64, Vec<f64>)> {
        check_w(w, self.dim())?;
        check_idx(idx, self.len())?;
        let mut g = vec![0.0; self.dim()];
        let mut loss = 0.0;
        for &i in idx {
            let (l, r) = self.residual(w, i);
            loss += l;
            for (gj, &x) in g.iter_mut().zip(&self.rows[i]) {
                *gj += r * x;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        Ok((loss * inv, g))
    }

    fn per_sample_grads(&self, w: &[f64], idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        check_w(w, self.dim())?;
        check_idx(idx, self.len())?;
        Ok(idx
            .iter()
            .map(|&i| {
                let (_, r) = self.residual(w, i);
                self.rows[i].iter().map(|x| r * x).collect()
            })
            .collect())
    }

    fn hvp(&self, w: &[f64], idx: &[usize], v: &[f64]) -> Result<Vec<f64>> {
        check_w(w, self.dim())?;
        check_w(v, self.dim())?;
        check_idx(idx, self.len())?;
        let mut out = vec![0.0; self.dim()];
        for &i in idx {
            let s = autodiff::sigmoid(dot(&self.rows[i], w));
            let c = s * (1.0 - s) * dot(&self.rows[i], v);
            for (o, &x) in out.iter_mut().zip(&self.rows[i]) {
                *o += c * x;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        Ok(out)
    }

    fn hessian(&self, w: &[f64], idx: &[usize]) -> Result<SymMatrix> {
        self.dense_hessian(w, idx)
    }

    fn labels(&self) -> Option<&[u8]> {
        Some(&self.labels)
    }
}

/// Per-sample quadratics `½(w − cᵢ)ᵀA(w − cᵢ)`; the Hessian is `A` everywhere.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub a: SymMatrix,
    pub centers: Vec<Vec<f64>>,
}

impl QuadraticObjective {
    pub fn new(a: SymMatrix, centers: Vec<Vec<f64>>) -> Result<Self> {
        if centers.is_empty() || centers.iter().any(|c| c.len() != a.dim()) {
            return Err(Error::Invalid("centers must be nonempty and match A".into()));
        }
        Ok(QuadraticObjective { a, centers })
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.a.dim()
    }

    fn len(&self) -> usize {
        self.centers.len()
    }

    fn loss_grad(&self, w: &[f64], idx: &[usize]) -> Result<(f64, Vec<f64>)> {
        check_w(w, self.dim())?;
        check_idx(idx, self.len())?;
        let mut g = vec![0.0; self.dim()];
        let mut loss = 0.0;
        for &i in idx {
            let r: Vec<f64> = w.iter().zip(&self.centers[i]).map(|(a, b)| a - b).collect();
            let ar = self.a.matvec(&r);
            loss += 0.5 * dot(&r, &ar);
            for (gj, v) in g.iter_mut().zip(ar) {
                *gj += v;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        Ok((loss * inv, g))
    }

    fn per_sample_grads(&self, w: &[f64], idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        check_w(w, self.dim())?;
        check_idx(idx, self.len())?;
        Ok(idx
            .iter()
            .map(|&i| {
                let r: Vec<f64> = w.iter().zip(&self.centers[i]).map(|(a, b)| a - b).collect();
                self.a.matvec(&r)
            })
            .collect())
    }

    fn hvp(&self, w: &[f64], _idx: &[usize], v: &[f64]) -> Result<Vec<f64>> {
        check_w(w, self.dim())?;
        check_w(v, self.dim())?;
        Ok(self.a.matvec(v))
    }

    fn hessian(&self, _w: &[f64], _idx: &[usize]) -> Result<SymMatrix> {
        Ok(self.a.clone())
    }
}

/// Multiclass softmax regression with weights `W (d×C)` and bias `(C)`,
/// differentiated through the autodiff tape.
#[derive(Debug, Clone)]
pub struct SoftmaxRegression {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    template: ParamVector,
}

struct SoftmaxProgram<'a> {
    labels: &'a [usize],
}

impl Program for SoftmaxProgram<'_> {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], x: &Tensor) -> Result<Var> {
        let xv = tape.constant(x.lift())?;
        let z = tape.matmul(xv, p[0])?;
        let z = tape.add_row(z, p[1])?;
        let lp = tape.log_softmax(z)?;
        let picked = tape.pick_per_row(lp, self.labels.to_vec())?;
        let m = tape.mean(picked)?;
        tape.scale(m, -1.0)
    }
}

impl SoftmaxRegression {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() || classes < 2 {
            return Err(Error::Invalid("softmax regression needs aligned data and >= 2 classes".into()));
        }
        let d = inputs[0].len();
        if d == 0 || inputs.iter().any(|r| r.len() != d) || labels.iter().any(|&y| y >= classes) {
            return Err(Error::Invalid("malformed softmax regression data".into()));
        }
        let mut template = ParamVector::new();
        template.push("W", Tensor::zeros(&[d, classes]));
        template.push("b", Tensor::zeros(&[classes]));
        Ok(SoftmaxRegression {
            inputs,
            labels,
            classes,
            template,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    fn subset(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        check_idx(idx, self.len())?;
        let d = self.input_dim();
        let data = idx.iter().flat_map(|&i| self.inputs[i].iter().copied()).collect();
        Ok((Tensor::matrix(idx.len(), d, data)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Class probabilities of sample `i`.
    pub fn probabilities(&self, w: &[f64], i: usize) -> Vec<f64> {
        let (d, c) = (self.input_dim(), self.classes);
        let z: Vec<f64> = (0..c)
            .map(|k| (0..d).map(|j| self.inputs[i][j] * w[j * c + k]).sum::<f64>() + w[d * c + k])
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

impl Objective for SoftmaxRegression {
    fn dim(&self) -> usize {
        self.template.dim()
    }

    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn loss_grad(&self, w: &[f64], idx: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (x, labels) = self.subset(idx)?;
        autodiff::value_and_grad(&SoftmaxProgram { labels: &labels }, &self.template.with_values(w)?, &x)
    }

    fn per_sample_grads(&self, w: &[f64], idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        idx.iter().map(|&i| Ok(self.loss_grad(w, &[i])?.1)).collect()
    }

    fn hvp(&self, w: &[f64], idx: &[usize], v: &[f64]) -> Result<Vec<f64>> {
        let (x, labels) = self.subset(idx)?;
        autodiff::hvp(&SoftmaxProgram { labels: &labels }, &self.template.with_values(w)?, &x, v)
    }
}
