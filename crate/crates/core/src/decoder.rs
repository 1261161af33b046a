//! Attribute-query cross-attention decoder.
//!
//! Every attribute's semantic vector queries the encoded regions, so row `a`
//! of the output is a region-pooled feature localized for attribute `a`.

use crate::error::{Error, Result};
use crate::numeric::{Graph, Matrix, ParamId, ParamStore, Rng, Var};

/// Per-attribute semantic vectors `v_A`, one row per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticAttributeMatrix(Matrix);

impl SemanticAttributeMatrix {
    pub fn new(v_a: Matrix) -> Result<Self> {
        if v_a.rows() == 0 || v_a.cols() == 0 {
            return Err(Error::invalid("semantic attribute matrix must be non-empty"));
        }
        if !v_a.is_finite() {
            return Err(Error::NonFinite("semantic attribute matrix".into()));
        }
        Ok(Self(v_a))
    }

    pub fn num_attributes(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub heads: Vec<AttentionHead>,
    pub w_o: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
    pub d_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub layers: Vec<DecoderLayer>,
    /// Residual + layer norm around the sublayers. Off reproduces the bare
    /// attention → projection → FFN stack.
    pub residual: bool,
}

pub struct DecoderDims {
    pub d_a: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
}

const NORM_EPS: f64 = 1e-5;

impl DecoderParams {
    pub fn init(store: &mut ParamStore, dims: &DecoderDims, residual: bool, rng: &mut Rng) -> Result<Self> {
        if dims.heads == 0 || dims.layers == 0 || dims.d_k == 0 {
            return Err(Error::invalid("decoder needs at least one layer, one head and d_k >= 1"));
        }
        let mut layers = Vec::with_capacity(dims.layers);
        for l in 0..dims.layers {
            let d_query = if l == 0 { dims.d_a } else { dims.d_model };
            let heads = (0..dims.heads)
                .map(|t| AttentionHead {
                    w_q: store.add_xavier(format!("decoder.{l}.head{t}.w_q"), d_query, dims.d_k, rng),
                    w_k: store.add_xavier(format!("decoder.{l}.head{t}.w_k"), dims.d_model, dims.d_k, rng),
                    w_v: store.add_xavier(format!("decoder.{l}.head{t}.w_v"), dims.d_model, dims.d_k, rng),
                })
                .collect();
            layers.push(DecoderLayer {
                heads,
                w_o: store.add_xavier(format!("decoder.{l}.w_o"), dims.heads * dims.d_k, dims.d_model, rng),
                w_1: store.add_xavier(format!("decoder.{l}.w_1"), dims.d_model, dims.d_ff, rng),
                b_1: store.add_zeros(format!("decoder.{l}.b_1"), 1, dims.d_ff),
                w_2: store.add_xavier(format!("decoder.{l}.w_2"), dims.d_ff, dims.d_model, rng),
                b_2: store.add_zeros(format!("decoder.{l}.b_2"), 1, dims.d_model),
                d_k: dims.d_k,
            });
        }
        Ok(Self { layers, residual })
    }

    /// Returns `F` (`A x d_model`) and the last layer's per-head attention maps.
    pub fn forward(&self, g: &mut Graph, u: Var, queries: Var) -> Result<(Var, Vec<Var>)> {
        let mut x = queries;
        let mut maps = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let (mut f_hat, attn) = layer.attend(g, u, x)?;
            if self.residual && l > 0 {
                f_hat = g.add(f_hat, x)?;
                f_hat = g.layer_norm_rows(f_hat, NORM_EPS);
            }
            let mut f = layer.ffn(g, f_hat)?;
            if self.residual {
                f = g.add(f, f_hat)?;
                f = g.layer_norm_rows(f, NORM_EPS);
            }
            x = f;
            maps = attn;
        }
        Ok((x, maps))
    }
}

impl DecoderLayer {
    fn attend(&self, g: &mut Graph, u: Var, queries: Var) -> Result<(Var, Vec<Var>)> {
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut maps = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let wq = g.param(head.w_q);
            let wk = g.param(head.w_k);
            let wv = g.param(head.w_v);
            let q = g.matmul(queries, wq)?;
            let k = g.matmul(u, wk)?;
            let v = g.matmul(u, wv)?;
            let logits = g.matmul_t(q, k)?;
            let logits = g.scale(logits, scale);
            let attn = g.softmax_rows(logits);
            outputs.push(g.matmul(attn, v)?);
            maps.push(attn);
        }
        let cat = if outputs.len() == 1 {
            outputs[0]
        } else {
            g.concat_cols(&outputs)?
        };
        let wo = g.param(self.w_o);
        Ok((g.matmul(cat, wo)?, maps))
    }

    fn ffn(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(self.w_1), g.param(self.b_1), g.param(self.w_2), g.param(self.b_2));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let h = g.matmul(h, w2)?;
        g.add_row(h, b2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub features: Matrix,
    /// One `A x HW` map per head, present when requested.
    pub attention: Option<Vec<Matrix>>,
}

pub fn decode(
    u: &Matrix,
    v_a: &SemanticAttributeMatrix,
    store: &ParamStore,
    params: &DecoderParams,
    capture_attention: bool,
) -> Result<DecodeOutput> {
    let mut g = Graph::new(store);
    let uv = g.constant(u.clone());
    let q = g.constant(v_a.matrix().clone());
    let (f, maps) = params.forward(&mut g, uv, q)?;
    Ok(DecodeOutput {
        features: g.value(f).clone(),
        attention: capture_attention.then(|| maps.iter().map(|&m| g.value(m).clone()).collect()),
    })
}

/// Head-0 attention of the decoder: row `a` is attribute `a`'s distribution
/// over regions.
pub fn attribute_attention(
    u: &Matrix,
    v_a: &SemanticAttributeMatrix,
    store: &ParamStore,
    params: &DecoderParams,
) -> Result<Matrix> {
    let out = decode(u, v_a, store, params, true)?;
    Ok(out.attention.expect("captured").swap_remove(0))
}
