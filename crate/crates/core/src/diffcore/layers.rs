use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Gelu,
}

/// `activation(input · W + b)`
pub fn dense_forward(
    g: &mut Graph<'_>,
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
    activation: Activation,
) -> Result<NodeId> {
    let (ir, ic) = g.shape(input);
    let (wr, wc) = g.shape(weight);
    if ic != wr {
        return Err(Error::Dimension(format!(
            "dense input {ir}x{ic} against weights {wr}x{wc}"
        )));
    }
    let y = g.matmul(input, weight)?;
    let y = g.add_row(y, bias)?;
    Ok(match activation {
        Activation::Identity => y,
        Activation::Gelu => g.gelu(y),
    })
}

/// Dense layer addressed by block names `{prefix}.w` / `{prefix}.b`.
pub fn dense(
    g: &mut Graph<'_>,
    input: NodeId,
    prefix: &str,
    activation: Activation,
) -> Result<NodeId> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    dense_forward(g, input, w, b, activation)
}

pub fn register_dense<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
    rng: &mut R,
) -> Result<()> {
    if zero {
        store.insert_zeros(&format!("{prefix}.w"), fan_in, fan_out)?;
    } else {
        store.insert_kaiming(&format!("{prefix}.w"), fan_in, fan_out, rng)?;
    }
    store.insert_zeros(&format!("{prefix}.b"), 1, fan_out)?;
    Ok(())
}

/// Registers `{prefix}.wq/.wk/.wv` (fan-in init) and a zero output projection
/// `{prefix}.wo/.bo`, so a fresh block is the identity map on its query.
pub fn register_attention<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    rng: &mut R,
) -> Result<()> {
    for p in ["wq", "wk", "wv"] {
        store.insert_kaiming(&format!("{prefix}.{p}"), dim, dim, rng)?;
    }
    store.insert_zeros(&format!("{prefix}.wo"), dim, dim)?;
    store.insert_zeros(&format!("{prefix}.bo"), 1, dim)?;
    Ok(())
}

/// Key/value projections of a token set; reusable across queries.
#[derive(Debug, Clone, Copy)]
pub struct KeyValues {
    pub keys: NodeId,
    pub values: NodeId,
}

pub fn project_kv(g: &mut Graph<'_>, tokens: NodeId, prefix: &str) -> Result<KeyValues> {
    if g.shape(tokens).0 == 0 {
        return Err(Error::Dimension(
            "cross-attention needs at least one key token".into(),
        ));
    }
    let wk = g.param(&format!("{prefix}.wk"))?;
    let wv = g.param(&format!("{prefix}.wv"))?;
    Ok(KeyValues {
        keys: g.matmul(tokens, wk)?,
        values: g.matmul(tokens, wv)?,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub output: NodeId,
    /// Row-stochastic matrix, one row per query.
    pub weights: NodeId,
}

/// Single-head scaled dot-product attention against pre-projected keys and
/// values, residual-added to the query.
pub fn attend(g: &mut Graph<'_>, query: NodeId, kv: KeyValues, prefix: &str) -> Result<Attended> {
    let d = g.shape(query).1;
    let wq = g.param(&format!("{prefix}.wq"))?;
    let wo = g.param(&format!("{prefix}.wo"))?;
    let bo = g.param(&format!("{prefix}.bo"))?;
    let q = g.matmul(query, wq)?;
    let scores = g.matmul_bt(q, kv.keys)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_rows(scores);
    let mixed = g.matmul(weights, kv.values)?;
    let projected = dense_forward(g, mixed, wo, bo, Activation::Identity)?;
    let output = g.add(query, projected)?;
    Ok(Attended { output, weights })
}

pub fn cross_attention(
    g: &mut Graph<'_>,
    query: NodeId,
    keys_values: NodeId,
    prefix: &str,
) -> Result<Attended> {
    let (qd, kd) = (g.shape(query).1, g.shape(keys_values).1);
    if qd != kd {
        return Err(Error::Dimension(format!(
            "query width {qd} against key width {kd}"
        )));
    }
    let kv = project_kv(g, keys_values, prefix)?;
    attend(g, query, kv, prefix)
}

/// Interleaved sin/cos embedding at geometric frequencies `1 .. base`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub base: f64,
}

impl TimeEmbedding {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time embedding dimension must be even and positive, got {dim}"
            )));
        }
        Ok(Self { dim, base })
    }

    pub fn frequency(&self, i: usize) -> f64 {
        let half = self.dim / 2;
        if half == 1 {
            1.0
        } else {
            self.base.powf(i as f64 / (half - 1) as f64)
        }
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        sinusoidal_embed(t, self)
    }
}

pub fn sinusoidal_embed(t: f64, emb: &TimeEmbedding) -> Vec<f64> {
    let mut out = Vec::with_capacity(emb.dim);
    for i in 0..emb.dim / 2 {
        let phase = t * emb.frequency(i);
        out.push(phase.sin());
        out.push(phase.cos());
    }
    out
}

/// Convenience for tests and tools: a 1×n tensor from a slice.
pub fn row(values: &[f64]) -> Tensor2 {
    Tensor2::row(values.to_vec())
}
