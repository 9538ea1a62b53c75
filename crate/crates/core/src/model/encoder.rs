use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamVector, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

pub const LN_EPS: f64 = 1e-5;

/// Attenuation of designated residual channels applied at every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticBias {
    /// 0-based channel indices that the encoder suppresses.
    pub channels: Vec<usize>,
    /// Fraction removed per layer, in `[0, 1]`.
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub visual_tokens: usize,
    pub region_count: usize,
    pub seed: u64,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub semantic_bias: Option<SemanticBias>,
}

fn default_mlp_ratio() -> usize {
    2
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 6,
            dim: 32,
            heads: 4,
            visual_tokens: 16,
            region_count: 3,
            seed: 0,
            mlp_ratio: default_mlp_ratio(),
            semantic_bias: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.visual_tokens == 0 || self.mlp_ratio == 0 {
            return Err(Error::Invalid("encoder extents must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Invalid(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if let Some(b) = &self.semantic_bias {
            if !(0.0..=1.0).contains(&b.strength) {
                return Err(Error::Invalid("semantic-bias strength must lie in [0, 1]".into()));
            }
            if b.channels.iter().any(|&c| c >= self.dim) {
                return Err(Error::Invalid("semantic-bias channel out of range".into()));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn sequence_len(&self, corit: bool) -> usize {
        1 + self.visual_tokens + if corit { self.region_count } else { 0 }
    }
}

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Vec<Tensor>,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl Block {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = Vec::new();
        for h in 0..self.wq.len() {
            v.extend([&self.wq[h], &self.wk[h], &self.wv[h], &self.wo[h]]);
        }
        v.extend([&self.w1, &self.w2]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        for (((q, k), vv), o) in self.wq.iter_mut().zip(&mut self.wk).zip(&mut self.wv).zip(&mut self.wo) {
            v.extend([q, k, vv, o]);
        }
        v.push(&mut self.w1);
        v.push(&mut self.w2);
        v
    }
}

/// Immutable seeded encoder. Nothing in the crate mutates it after
/// construction; training touches only probe heads.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    cls: Vec<f64>,
    blocks: Vec<Block>,
    /// Per-channel multiplier implementing the semantic-bias projection.
    channel_gain: Option<Vec<f64>>,
}

fn gaussian(tree: SeedTree, rows: usize, cols: usize, std: f64) -> Tensor {
    let mut rng = tree.rng();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

impl FrozenEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let root = SeedTree::new(config.seed).child("encoder");
        let (d, dh, hid) = (config.dim, config.head_dim(), config.hidden());
        let std_in = 1.0 / (d as f64).sqrt();
        let cls = gaussian(root.child("cls"), 1, d, 1.0).into_data();
        let blocks = (0..config.layers)
            .map(|l| {
                let t = root.child("block").index(l as u64);
                let per_head = |name: &str, rows: usize, cols: usize, std: f64| -> Vec<Tensor> {
                    (0..config.heads)
                        .map(|h| gaussian(t.child(name).index(h as u64), rows, cols, std))
                        .collect()
                };
                Block {
                    wq: per_head("wq", d, dh, std_in),
                    wk: per_head("wk", d, dh, std_in),
                    wv: per_head("wv", d, dh, std_in),
                    wo: per_head("wo", dh, d, std_in),
                    w1: gaussian(t.child("w1"), d, hid, std_in),
                    w2: gaussian(t.child("w2"), hid, d, 1.0 / (hid as f64).sqrt()),
                }
            })
            .collect();
        Ok(Self::assemble(config, cls, blocks))
    }

    /// Encoder with every weight and the class embedding set to zero.
    pub fn zeroed(config: EncoderConfig) -> Result<Self> {
        let mut e = Self::new(config)?;
        e.cls.iter_mut().for_each(|v| *v = 0.0);
        for b in &mut e.blocks {
            for t in b.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(e)
    }

    fn assemble(config: EncoderConfig, cls: Vec<f64>, blocks: Vec<Block>) -> Self {
        let channel_gain = config.semantic_bias.as_ref().map(|b| {
            let mut g = vec![1.0; config.dim];
            for &c in &b.channels {
                g[c] = 1.0 - b.strength;
            }
            g
        });
        FrozenEncoder {
            config,
            cls,
            blocks,
            channel_gain,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn cls_embedding(&self) -> &[f64] {
        &self.cls
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn channel_gain(&self) -> Option<&[f64]> {
        self.channel_gain.as_deref()
    }

    /// All parameters in a fixed order: class embedding, then block tensors.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.cls.clone();
        for b in &self.blocks {
            for t in b.tensors() {
                out.extend_from_slice(t.data());
            }
        }
        out
    }

    pub(crate) fn from_flat(config: EncoderConfig, flat: &[f64]) -> Result<Self> {
        let mut e = Self::new(config)?;
        let expected = e.flat_params().len();
        if flat.len() != expected {
            return Err(Error::Shape {
                context: "encoder parameter count".into(),
                expected: vec![expected],
                got: vec![flat.len()],
            });
        }
        let d = e.config.dim;
        e.cls.copy_from_slice(&flat[..d]);
        let mut at = d;
        for b in &mut e.blocks {
            for t in b.tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
        Ok(e)
    }

    /// SHA-256 over the little-endian parameter bytes, hex encoded.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.flat_params() {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every block weight as a trainable block, for gradient checking the
    /// full model. Block order matches [`BlockVars::from_params`].
    pub fn param_vector(&self) -> ParamVector {
        let mut p = ParamVector::new();
        for (l, b) in self.blocks.iter().enumerate() {
            for (k, t) in b.tensors().into_iter().enumerate() {
                p.push(&format!("layer{l}.w{k}"), t.clone());
            }
        }
        p
    }

    /// Register block `l` weights as constants.
    pub fn block_constants<S: Scalar>(&self, tape: &mut Tape<S>, l: usize) -> Result<BlockVars> {
        let vars = self.blocks[l]
            .tensors()
            .into_iter()
            .map(|t| tape.constant(t.lift()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockVars::new(vars, self.config.heads))
    }

    /// Apply block `l` to a `(T × D)` token matrix on `tape`.
    pub fn block_forward<S: Scalar>(&self, tape: &mut Tape<S>, w: &BlockVars, x: Var) -> Result<Var> {
        let gain = match &self.channel_gain {
            Some(g) => Some(tape.constant(Tensor::vector(g.clone()).lift())?),
            None => None,
        };
        let project = |tape: &mut Tape<S>, v: Var| -> Result<Var> {
            match gain {
                Some(g) => tape.mul_row(v, g),
                None => Ok(v),
            }
        };
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();

        let xn = tape.layer_norm(x, LN_EPS)?;
        let xn = project(tape, xn)?;
        let mut attn: Option<Var> = None;
        for h in 0..self.config.heads {
            let q = tape.matmul(xn, w.wq[h])?;
            let k = tape.matmul(xn, w.wk[h])?;
            let v = tape.matmul(xn, w.wv[h])?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s)?;
            let o = tape.matmul(a, v)?;
            let o = tape.matmul(o, w.wo[h])?;
            attn = Some(match attn {
                Some(acc) => tape.add(acc, o)?,
                None => o,
            });
        }
        let x1 = tape.add(x, attn.expect("at least one head"))?;
        let xn2 = tape.layer_norm(x1, LN_EPS)?;
        let xn2 = project(tape, xn2)?;
        let h = tape.matmul(xn2, w.w1)?;
        let h = tape.gelu(h)?;
        let m = tape.matmul(h, w.w2)?;
        let x2 = tape.add(x1, m)?;
        project(tape, x2)
    }

    /// Apply block `l` to a concrete token matrix.
    pub fn apply_block(&self, l: usize, tokens: &Tensor) -> Result<Tensor> {
        let mut tape: Tape<f64> = Tape::new();
        let w = self.block_constants(&mut tape, l)?;
        let x = tape.constant(tokens.clone())?;
        match self.block_forward(&mut tape, &w, x) {
            Ok(y) => Ok(tape.value(y).clone()),
            Err(Error::NonFinite { .. }) => Err(Error::NonFiniteActivation { layer: l + 1 }),
            Err(e) => Err(e),
        }
    }
}

/// Tape handles for one block's weights.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Vec<Var>,
    pub w1: Var,
    pub w2: Var,
}

impl BlockVars {
    fn new(vars: Vec<Var>, heads: usize) -> Self {
        let mut it = vars.into_iter();
        let mut b = BlockVars {
            wq: Vec::new(),
            wk: Vec::new(),
            wv: Vec::new(),
            wo: Vec::new(),
            w1: Var(0),
            w2: Var(0),
        };
        for _ in 0..heads {
            b.wq.push(it.next().expect("wq"));
            b.wk.push(it.next().expect("wk"));
            b.wv.push(it.next().expect("wv"));
            b.wo.push(it.next().expect("wo"));
        }
        b.w1 = it.next().expect("w1");
        b.w2 = it.next().expect("w2");
        b
    }

    /// Split the vars registered from [`FrozenEncoder::param_vector`] per layer.
    pub fn from_params(params: &[Var], layers: usize, heads: usize) -> Vec<BlockVars> {
        let per = 4 * heads + 2;
        (0..layers)
            .map(|l| BlockVars::new(params[l * per..(l + 1) * per].to_vec(), heads))
            .collect()
    }
}
