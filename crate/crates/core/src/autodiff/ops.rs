//! The closed primitive set. Each primitive provides a forward rule and a
//! vector-Jacobian product, both written over [`Scalar`]. Evaluating the VJP on
//! dual numbers differentiates it once more, so second derivatives come for free
//! for every primitive that is smooth; `Relu` is the one that is not.

use super::scalar::Scalar;
use super::tensor::Tensor;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    /// `(n, d) + (d)` broadcast over rows.
    AddRow,
    /// `(n, d) * (d)` broadcast over rows.
    MulRow,
    Scale(f64),
    MatMul,
    Transpose,
    Softmax,
    LogSoftmax,
    LayerNorm(f64),
    Gelu,
    Tanh,
    Exp,
    Log,
    Softplus,
    Relu,
    Sum,
    Mean,
    /// `(n, d) -> (d)` average over rows.
    MeanRows,
    GatherRows(Vec<usize>),
    /// `(n, c) -> (n)` selecting one column per row.
    PickPerRow(Vec<usize>),
    ConcatRows,
    Reshape(Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::Gelu => "gelu",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softplus => "softplus",
            Op::Relu => "relu",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MeanRows => "mean_rows",
            Op::GatherRows(_) => "gather_rows",
            Op::PickPerRow(_) => "pick_per_row",
            Op::ConcatRows => "concat_rows",
            Op::Reshape(_) => "reshape",
        }
    }

    pub fn twice_differentiable(&self) -> bool {
        !matches!(self, Op::Relu)
    }

    /// Output shape, or `None` when the inputs are incompatible.
    pub fn out_shape(&self, shapes: &[&[usize]]) -> Option<Vec<usize>> {
        let rows_cols = |s: &[usize]| -> Option<(usize, usize)> {
            match s.len() {
                1 => Some((1, s[0])),
                2 => Some((s[0], s[1])),
                _ => None,
            }
        };
        match self {
            Op::Leaf => None,
            Op::Add | Op::Sub | Op::Mul => (shapes[0] == shapes[1]).then(|| shapes[0].to_vec()),
            Op::AddRow | Op::MulRow => {
                let (_, c) = rows_cols(shapes[0])?;
                (shapes[1] == [c]).then(|| shapes[0].to_vec())
            }
            Op::Scale(_)
            | Op::Gelu
            | Op::Tanh
            | Op::Exp
            | Op::Log
            | Op::Softplus
            | Op::Relu
            | Op::Softmax
            | Op::LogSoftmax
            | Op::LayerNorm(_) => {
                if matches!(self, Op::Softmax | Op::LogSoftmax | Op::LayerNorm(_)) {
                    rows_cols(shapes[0])?;
                }
                Some(shapes[0].to_vec())
            }
            Op::MatMul => {
                if shapes[0].len() != 2 || shapes[1].len() != 2 || shapes[0][1] != shapes[1][0] {
                    return None;
                }
                Some(vec![shapes[0][0], shapes[1][1]])
            }
            Op::Transpose => {
                let (r, c) = rows_cols(shapes[0])?;
                Some(vec![c, r])
            }
            Op::Sum | Op::Mean => Some(vec![]),
            Op::MeanRows => {
                let (_, c) = rows_cols(shapes[0])?;
                Some(vec![c])
            }
            Op::GatherRows(idx) => {
                let (r, c) = rows_cols(shapes[0])?;
                (!idx.is_empty() && idx.iter().all(|&i| i < r)).then(|| vec![idx.len(), c])
            }
            Op::PickPerRow(idx) => {
                let (r, c) = rows_cols(shapes[0])?;
                (idx.len() == r && idx.iter().all(|&i| i < c)).then(|| vec![r])
            }
            Op::ConcatRows => {
                let (r0, c0) = rows_cols(shapes[0])?;
                let (r1, c1) = rows_cols(shapes[1])?;
                (c0 == c1).then(|| vec![r0 + r1, c0])
            }
            Op::Reshape(s) => {
                let n: usize = shapes[0].iter().product();
                (s.iter().product::<usize>() == n).then(|| s.clone())
            }
        }
    }

    pub fn forward<S: Scalar>(&self, x: &[&Tensor<S>], shape: Vec<usize>) -> Tensor<S> {
        let a = x[0];
        let data: Vec<S> = match self {
            Op::Leaf => unreachable!("leaves carry their own value"),
            Op::Add => zip(a, x[1], |p, q| p + q),
            Op::Sub => zip(a, x[1], |p, q| p - q),
            Op::Mul => zip(a, x[1], |p, q| p * q),
            Op::AddRow => row_bcast(a, x[1], |p, q| p + q),
            Op::MulRow => row_bcast(a, x[1], |p, q| p * q),
            Op::Scale(c) => a.data().iter().map(|&p| p.scale(*c)).collect(),
            Op::MatMul => matmul(a, x[1]),
            Op::Transpose => transpose(a),
            Op::Softmax => rowwise(a, softmax_row),
            Op::LogSoftmax => rowwise(a, log_softmax_row),
            Op::LayerNorm(eps) => rowwise(a, |r| layer_norm_row(r, *eps)),
            Op::Gelu => a.data().iter().map(|&p| gelu(p)).collect(),
            Op::Tanh => a.data().iter().map(|&p| p.tanh()).collect(),
            Op::Exp => a.data().iter().map(|&p| p.exp()).collect(),
            Op::Log => a.data().iter().map(|&p| p.ln()).collect(),
            Op::Softplus => a.data().iter().map(|&p| softplus(p)).collect(),
            Op::Relu => a
                .data()
                .iter()
                .map(|&p| if p.value() > 0.0 { p } else { S::zero() })
                .collect(),
            Op::Sum => vec![sum(a.data())],
            Op::Mean => vec![sum(a.data()).scale(1.0 / a.len() as f64)],
            Op::MeanRows => {
                let (r, c) = a.dims2();
                let mut out = vec![S::zero(); c];
                for i in 0..r {
                    for (o, &v) in out.iter_mut().zip(a.row(i)) {
                        *o += v;
                    }
                }
                out.into_iter().map(|v| v.scale(1.0 / r as f64)).collect()
            }
            Op::GatherRows(idx) => idx.iter().flat_map(|&i| a.row(i).to_vec()).collect(),
            Op::PickPerRow(idx) => idx.iter().enumerate().map(|(r, &c)| a.row(r)[c]).collect(),
            Op::ConcatRows => a.data().iter().chain(x[1].data()).copied().collect(),
            Op::Reshape(_) => a.data().to_vec(),
        };
        Tensor::new(shape, data).expect("shape validated at record time")
    }

    /// Adjoints of every input given the adjoint `g` of the output `y`.
    pub fn vjp<S: Scalar>(&self, x: &[&Tensor<S>], y: &Tensor<S>, g: &Tensor<S>) -> Vec<Tensor<S>> {
        let a = x[0];
        let like = |t: &Tensor<S>, data: Vec<S>| Tensor::new(t.shape().to_vec(), data).expect("same shape");
        match self {
            Op::Leaf => vec![],
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.map(|v| -v)],
            Op::Mul => vec![like(a, zip(g, x[1], |p, q| p * q)), like(a, zip(g, a, |p, q| p * q))],
            Op::AddRow => vec![g.clone(), like(x[1], col_sum(g))],
            Op::MulRow => {
                let ga = row_bcast(g, x[1], |p, q| p * q);
                let gb = col_sum(&like(g, zip(g, a, |p, q| p * q)));
                vec![like(a, ga), like(x[1], gb)]
            }
            Op::Scale(c) => vec![g.map(|v| v.scale(*c))],
            Op::MatMul => {
                let b = x[1];
                let bt = Tensor::new(vec![b.shape()[1], b.shape()[0]], transpose(b)).unwrap();
                let at = Tensor::new(vec![a.shape()[1], a.shape()[0]], transpose(a)).unwrap();
                vec![like(a, matmul(g, &bt)), like(b, matmul(&at, g))]
            }
            Op::Transpose => vec![like(a, transpose(g))],
            Op::Softmax => {
                let (r, c) = y.dims2();
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot = sum_prod(yr, gr);
                    out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                vec![like(a, out)]
            }
            Op::LogSoftmax => {
                let (r, c) = y.dims2();
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let gs = sum(gr);
                    out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| gv - yv.exp() * gs));
                }
                vec![like(a, out)]
            }
            Op::LayerNorm(eps) => {
                let (r, c) = a.dims2();
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    let xr = a.row(i);
                    let gr = g.row(i);
                    let inv_n = 1.0 / c as f64;
                    let mu = sum(xr).scale(inv_n);
                    let var = xr.iter().fold(S::zero(), |s, &v| s + (v - mu) * (v - mu)).scale(inv_n);
                    let inv_sd = S::one() / (var + S::from_f64(*eps)).sqrt();
                    let yr: Vec<S> = xr.iter().map(|&v| (v - mu) * inv_sd).collect();
                    let gm = sum(gr).scale(inv_n);
                    let gy = sum_prod(gr, &yr).scale(inv_n);
                    out.extend(gr.iter().zip(&yr).map(|(&gv, &yv)| inv_sd * (gv - gm - yv * gy)));
                }
                vec![like(a, out)]
            }
            Op::Gelu => vec![like(a, zip(g, a, |gv, xv| gv * gelu_grad(xv)))],
            Op::Tanh => vec![like(a, zip(g, y, |gv, yv| gv * (S::one() - yv * yv)))],
            Op::Exp => vec![like(a, zip(g, y, |gv, yv| gv * yv))],
            Op::Log => vec![like(a, zip(g, a, |gv, xv| gv / xv))],
            Op::Softplus => vec![like(a, zip(g, a, |gv, xv| gv * sigmoid(xv)))],
            Op::Relu => vec![like(
                a,
                zip(g, a, |gv, xv| if xv.value() > 0.0 { gv } else { S::zero() }),
            )],
            Op::Sum => vec![Tensor::full(a.shape(), g.item())],
            Op::Mean => vec![Tensor::full(a.shape(), g.item().scale(1.0 / a.len() as f64))],
            Op::MeanRows => {
                let (r, _) = a.dims2();
                let row: Vec<S> = g.data().iter().map(|v| v.scale(1.0 / r as f64)).collect();
                vec![like(a, (0..r).flat_map(|_| row.iter().copied()).collect())]
            }
            Op::GatherRows(idx) => {
                let (_, c) = a.dims2();
                let mut out = vec![S::zero(); a.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        out[i * c + j] += g.data()[k * c + j];
                    }
                }
                vec![like(a, out)]
            }
            Op::PickPerRow(idx) => {
                let (_, c) = a.dims2();
                let mut out = vec![S::zero(); a.len()];
                for (r, &j) in idx.iter().enumerate() {
                    out[r * c + j] = g.data()[r];
                }
                vec![like(a, out)]
            }
            Op::ConcatRows => {
                let n0 = a.len();
                vec![like(a, g.data()[..n0].to_vec()), like(x[1], g.data()[n0..].to_vec())]
            }
            Op::Reshape(_) => vec![like(a, g.data().to_vec())],
        }
    }
}

fn sum<S: Scalar>(xs: &[S]) -> S {
    xs.iter().fold(S::zero(), |s, &v| s + v)
}

fn sum_prod<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |s, (&p, &q)| s + p * q)
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Vec<S> {
    a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect()
}

fn row_bcast<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Vec<S> {
    let (_, c) = a.dims2();
    a.data()
        .iter()
        .enumerate()
        .map(|(k, &p)| f(p, b.data()[k % c]))
        .collect()
}

fn col_sum<S: Scalar>(g: &Tensor<S>) -> Vec<S> {
    let (r, c) = g.dims2();
    let mut out = vec![S::zero(); c];
    for i in 0..r {
        for (o, &v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Vec<S> {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, &bv) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose<S: Scalar>(a: &Tensor<S>) -> Vec<S> {
    let (r, c) = a.dims2();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(a.data()[i * c + j]);
        }
    }
    out
}

fn rowwise<S: Scalar>(a: &Tensor<S>, f: impl Fn(&[S]) -> Vec<S>) -> Vec<S> {
    let (r, _) = a.dims2();
    (0..r).flat_map(|i| f(a.row(i))).collect()
}

fn row_max<S: Scalar>(r: &[S]) -> S {
    S::from_f64(r.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max))
}

fn softmax_row<S: Scalar>(r: &[S]) -> Vec<S> {
    let m = row_max(r);
    let e: Vec<S> = r.iter().map(|&v| (v - m).exp()).collect();
    let z = sum(&e);
    e.into_iter().map(|v| v / z).collect()
}

fn log_softmax_row<S: Scalar>(r: &[S]) -> Vec<S> {
    let m = row_max(r);
    let lz = sum(&r.iter().map(|&v| (v - m).exp()).collect::<Vec<_>>()).ln();
    r.iter().map(|&v| v - m - lz).collect()
}

fn layer_norm_row<S: Scalar>(r: &[S], eps: f64) -> Vec<S> {
    let inv_n = 1.0 / r.len() as f64;
    let mu = sum(r).scale(inv_n);
    let var = r.iter().fold(S::zero(), |s, &v| s + (v - mu) * (v - mu)).scale(inv_n);
    let inv_sd = S::one() / (var + S::from_f64(eps)).sqrt();
    r.iter().map(|&v| (v - mu) * inv_sd).collect()
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let u = (x + x * x * x.scale(GELU_C)).scale(GELU_K);
    x.scale(0.5) * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let u = (x + x * x * x.scale(GELU_C)).scale(GELU_K);
    let t = u.tanh();
    let du = (S::one() + x * x.scale(3.0 * GELU_C)).scale(GELU_K);
    (S::one() + t).scale(0.5) + x.scale(0.5) * (S::one() - t * t) * du
}

pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    if x.value() > 0.0 {
        x + (S::one() + (-x).exp()).ln()
    } else {
        (S::one() + x.exp()).ln()
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x.value() >= 0.0 {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
