//! Frozen toy transformer encoder, the plain linear probe and the CoRIT head
//! (region tokens injected at every layer, hierarchical fusion of an
//! intermediate and the final layer).

mod blob;
mod encoder;

pub use blob::{load_encoder, save_encoder, BLOB_MAGIC, BLOB_VERSION};
pub use encoder::{Block, BlockVars, EncoderConfig, FrozenEncoder, SemanticBias, LN_EPS};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Program, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::regions::{self, RegionAnchor, RegionSpec};

/// Token layout `[CLS | R₁..R_K | V₁..V_N]` at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub layer: usize,
    pub dim: usize,
    pub cls: Vec<f64>,
    /// `K × D`, row-major.
    pub regions: Vec<f64>,
    /// `N × D`, row-major.
    pub visuals: Vec<f64>,
}

impl TokenSequence {
    pub fn region_count(&self) -> usize {
        self.regions.len() / self.dim
    }

    pub fn visual_count(&self) -> usize {
        self.visuals.len() / self.dim
    }

    pub fn region(&self, k: usize) -> &[f64] {
        &self.regions[k * self.dim..(k + 1) * self.dim]
    }

    pub fn visuals_tensor(&self) -> Tensor {
        Tensor::matrix(self.visual_count(), self.dim, self.visuals.clone()).expect("non-empty visuals")
    }

    /// The whole sequence as a `(1 + K + N) × D` matrix.
    pub fn to_tensor(&self) -> Tensor {
        let rows = 1 + self.region_count() + self.visual_count();
        let data = self.cls.iter().chain(&self.regions).chain(&self.visuals).copied().collect();
        Tensor::matrix(rows, self.dim, data).expect("non-empty sequence")
    }

    fn from_tensor(t: &Tensor, layer: usize, k: usize) -> Self {
        let (_, d) = t.dims2();
        let data = t.data();
        TokenSequence {
            layer,
            dim: d,
            cls: data[..d].to_vec(),
            regions: data[d..(1 + k) * d].to_vec(),
            visuals: data[(1 + k) * d..].to_vec(),
        }
    }

    /// `[CLS, R]` flattened.
    pub fn fused_row(&self) -> Vec<f64> {
        self.cls.iter().chain(&self.regions).copied().collect()
    }
}

fn check_visuals(enc: &FrozenEncoder, v: &Tensor) -> Result<()> {
    let c = enc.config();
    if v.shape() != [c.visual_tokens, c.dim] {
        return Err(Error::Shape {
            context: "visual tokens".into(),
            expected: vec![c.visual_tokens, c.dim],
            got: v.shape().to_vec(),
        });
    }
    if !v.all_finite() {
        return Err(Error::NonFiniteActivation { layer: 0 });
    }
    Ok(())
}

/// Run the `[CLS, V]` sequence through every layer; returns `L + 1` snapshots.
pub fn encode_plain(enc: &FrozenEncoder, visuals: &Tensor) -> Result<Vec<TokenSequence>> {
    check_visuals(enc, visuals)?;
    let d = enc.config().dim;
    let mut seq = TokenSequence {
        layer: 0,
        dim: d,
        cls: enc.cls_embedding().to_vec(),
        regions: vec![],
        visuals: visuals.data().to_vec(),
    };
    let mut out = Vec::with_capacity(enc.config().layers + 1);
    for l in 0..enc.config().layers {
        out.push(seq.clone());
        let y = enc.apply_block(l, &seq.to_tensor())?;
        seq = TokenSequence::from_tensor(&y, l + 1, 0);
    }
    out.push(seq);
    Ok(out)
}

/// Everything produced by a paired original/counterpart pass. Per-layer
/// vectors are indexed by `l − 1` for layers `1..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoritTrace {
    /// `L + 1` snapshots of the original stream; regions hold `R^(l)` after injection.
    pub orig: Vec<TokenSequence>,
    /// `L + 1` snapshots of the counterpart stream (sharing the injected regions).
    pub counterpart: Vec<TokenSequence>,
    pub cgp: Vec<Tensor>,
    pub anchors: Vec<Vec<RegionAnchor>>,
    /// `K × N` masks per layer.
    pub masks: Vec<Vec<Vec<bool>>>,
    pub pooled: Vec<Vec<Vec<f64>>>,
}

/// Paired forward pass with region-token injection. At every layer both
/// streams go through the same block; the discrepancy of their visual tokens
/// selects, per region, which original tokens are pooled and added to the
/// region tokens that enter the next layer.
pub fn encode_corit(
    enc: &FrozenEncoder,
    orig: &Tensor,
    counterpart: &Tensor,
    regions: &[RegionSpec],
    alpha: f64,
    epsilon: f64,
) -> Result<CoritTrace> {
    check_visuals(enc, orig)?;
    check_visuals(enc, counterpart)?;
    if !(alpha >= 0.0) {
        return Err(Error::Invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    let cfg = enc.config();
    for r in regions {
        r.validate(cfg.visual_tokens)?;
    }
    let (d, k) = (cfg.dim, regions.len());
    let mut so = TokenSequence {
        layer: 0,
        dim: d,
        cls: enc.cls_embedding().to_vec(),
        regions: vec![0.0; k * d],
        visuals: orig.data().to_vec(),
    };
    let mut sc = TokenSequence {
        visuals: counterpart.data().to_vec(),
        ..so.clone()
    };
    let mut trace = CoritTrace {
        orig: vec![so.clone()],
        counterpart: vec![sc.clone()],
        cgp: vec![],
        anchors: vec![],
        masks: vec![],
        pooled: vec![],
    };
    for l in 0..cfg.layers {
        let yo = TokenSequence::from_tensor(&enc.apply_block(l, &so.to_tensor())?, l + 1, k);
        let yc = TokenSequence::from_tensor(&enc.apply_block(l, &sc.to_tensor())?, l + 1, k);
        let vo = yo.visuals_tensor();
        let cgp = regions::compute_cgp(&vo, &yc.visuals_tensor())?;
        let mut injected = yo.regions.clone();
        let (mut anchors, mut masks, mut pooled) = (vec![], vec![], vec![]);
        for (kk, r) in regions.iter().enumerate() {
            let a = regions::anchor(&cgp, r)?;
            let m = regions::refine_mask(&cgp, &a, r, alpha)?;
            let p = regions::pool(&vo, &m, epsilon)?;
            for (dst, &v) in injected[kk * d..(kk + 1) * d].iter_mut().zip(&p) {
                *dst += v;
            }
            anchors.push(a);
            masks.push(m);
            pooled.push(p);
        }
        so = TokenSequence {
            regions: injected.clone(),
            ..yo
        };
        sc = TokenSequence {
            regions: injected,
            ..yc
        };
        trace.orig.push(so.clone());
        trace.counterpart.push(sc.clone());
        trace.cgp.push(cgp);
        trace.anchors.push(anchors);
        trace.masks.push(masks);
        trace.pooled.push(pooled);
    }
    Ok(trace)
}

/// `Concat([CLS, R]^(l_mid), [CLS, R]^(L))`.
pub fn hri_fuse(states: &[TokenSequence], l_mid: usize, layers: usize) -> Result<Vec<f64>> {
    if !(1 <= l_mid && l_mid < layers) {
        return Err(Error::Invalid(format!("l_mid {l_mid} must lie in [1, {layers})")));
    }
    if states.len() != layers + 1 {
        return Err(Error::Invalid(format!("expected {} snapshots, got {}", layers + 1, states.len())));
    }
    let mut f = states[l_mid].fused_row();
    f.extend(states[layers].fused_row());
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl ProbeHead {
    pub fn zeros(feature_dim: usize) -> Self {
        ProbeHead {
            weight: vec![0.0; feature_dim],
            bias: 0.0,
        }
    }

    /// Parameters laid out as `[weight.., bias]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weight.clone();
        v.push(self.bias);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let (w, b) = flat.split_at(flat.len() - 1);
        ProbeHead {
            weight: w.to_vec(),
            bias: b[0],
        }
    }
}

pub fn classify(head: &ProbeHead, feature: &[f64]) -> Result<f64> {
    if feature.len() != head.weight.len() {
        return Err(Error::Shape {
            context: "classify".into(),
            expected: vec![head.weight.len()],
            got: vec![feature.len()],
        });
    }
    Ok(head.weight.iter().zip(feature).map(|(w, x)| w * x).sum::<f64>() + head.bias)
}

/// Plain probe on the final class token followed by binary cross-entropy, with
/// every encoder weight exposed as a parameter block. Used to check gradients
/// through the whole toy model; the input is the `N × D` visual tokens.
pub struct ToyModelProgram<'a> {
    pub encoder: &'a FrozenEncoder,
    pub head: ProbeHead,
    pub label: f64,
}

impl Program for ToyModelProgram<'_> {
    fn input_shape(&self) -> Option<Vec<usize>> {
        let c = self.encoder.config();
        Some(vec![c.visual_tokens, c.dim])
    }

    fn build<S: Scalar>(&self, tape: &mut Tape<S>, params: &[Var], input: &Tensor) -> Result<Var> {
        let cfg = self.encoder.config();
        let blocks = BlockVars::from_params(params, cfg.layers, cfg.heads);
        let cls = tape.constant(Tensor::matrix(1, cfg.dim, self.encoder.cls_embedding().to_vec())?.lift())?;
        let v = tape.constant(input.lift())?;
        let mut x = tape.concat_rows(cls, v)?;
        for b in &blocks {
            x = self.encoder.block_forward(tape, b, x)?;
        }
        let cls_out = tape.gather_rows(x, vec![0])?;
        let w = tape.constant(Tensor::matrix(cfg.dim, 1, self.head.weight.clone())?.lift())?;
        let z = tape.matmul(cls_out, w)?;
        let z = tape.reshape(z, vec![])?;
        // softplus(z) − y·z is the logistic loss on a logit z.
        let zb = tape.constant(Tensor::scalar(S::from_f64(self.head.bias)))?;
        let z = tape.add(z, zb)?;
        let sp = tape.softplus(z)?;
        let yz = tape.scale(z, self.label)?;
        tape.sub(sp, yz)
    }
}
