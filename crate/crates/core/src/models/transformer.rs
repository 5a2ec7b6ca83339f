//! Post-norm Transformer blocks with causal multi-head self-attention.
//!
//! Query, key and value projections are stored as `d_model × d_model`
//! matrices whose column block `i·d/h .. (i+1)·d/h` is head `i`'s
//! `d_model × ⌊d/h⌋` projection.

use super::{glorot, ModelConfig, ParamStore, TokenBatch, TrajectoryModel, LAYER_NORM_EPS};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(super) struct BlockIds {
    w_q: usize,
    w_k: usize,
    w_v: usize,
    w_o: usize,
    ln1_gain: usize,
    ln1_bias: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
    ln2_gain: usize,
    ln2_bias: usize,
}

pub(super) fn init(config: &ModelConfig, params: &mut ParamStore, rng: &mut RngState) -> Vec<BlockIds> {
    let (d, f) = (config.d_model, config.ffn_hidden);
    (0..config.layer_count)
        .map(|l| {
            let mut add = |name: &str, t: Tensor| params.add(format!("block.{l}.{name}"), t);
            BlockIds {
                w_q: add("w_q", glorot(&[d, d], rng)),
                w_k: add("w_k", glorot(&[d, d], rng)),
                w_v: add("w_v", glorot(&[d, d], rng)),
                w_o: add("w_o", glorot(&[d, d], rng)),
                ln1_gain: add("ln1.gain", Tensor::full(&[d], 1.0)),
                ln1_bias: add("ln1.bias", Tensor::zeros(&[d])),
                ffn_w1: add("ffn.w1", glorot(&[d, f], rng)),
                ffn_b1: add("ffn.b1", Tensor::zeros(&[f])),
                ffn_w2: add("ffn.w2", glorot(&[f, d], rng)),
                ffn_b2: add("ffn.b2", Tensor::zeros(&[d])),
                ln2_gain: add("ln2.gain", Tensor::full(&[d], 1.0)),
                ln2_bias: add("ln2.bias", Tensor::zeros(&[d])),
            }
        })
        .collect()
}

/// Sinusoidal position table `[len, d]`: sin on even columns, cos on odd,
/// with wavelength `10000^(2i/d)`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(&[len, d], pe).expect("shape")
}

pub(super) fn forward(
    model: &TrajectoryModel,
    blocks: &[BlockIds],
    g: &mut Graph,
    x: Var,
    batch: &TokenBatch,
    mut dropout: Option<&mut RngState>,
) -> Result<(Var, Vec<Var>)> {
    let cfg = model.config();
    let p = model.params();
    let rate = cfg.dropout_rate;
    let mut drop = |g: &mut Graph, v: Var| -> Result<Var> {
        match dropout.as_deref_mut() {
            Some(rng) => g.dropout(v, rate, rng, true),
            None => Ok(v),
        }
    };

    let pe = g.constant(positional_encoding(batch.len, cfg.d_model));
    let x = g.add(x, pe)?;
    let mut x = drop(g, x)?;
    let key_valid = batch.key_valid();
    let mut attention = Vec::with_capacity(blocks.len());
    for ids in blocks {
        let mut param = |id: usize| g.param(id, p.get(id));
        let (w_q, w_k, w_v, w_o) = (param(ids.w_q), param(ids.w_k), param(ids.w_v), param(ids.w_o));
        let (ln1_g, ln1_b, ln2_g, ln2_b) = (param(ids.ln1_gain), param(ids.ln1_bias), param(ids.ln2_gain), param(ids.ln2_bias));
        let (w1, b1, w2, b2) = (param(ids.ffn_w1), param(ids.ffn_b1), param(ids.ffn_w2), param(ids.ffn_b2));

        let q = g.matmul(x, w_q)?;
        let k = g.matmul(x, w_k)?;
        let v = g.matmul(x, w_v)?;
        let att = g.attention(q, k, v, cfg.head_count, Some(&key_valid))?;
        attention.push(att);
        let a = g.matmul(att, w_o)?;
        let a = drop(g, a)?;
        let r = g.add(x, a)?;
        x = g.layer_norm(r, ln1_g, ln1_b, LAYER_NORM_EPS)?;

        let f = g.matmul(x, w1)?;
        let f = g.add(f, b1)?;
        let f = g.relu(f)?;
        let f = g.matmul(f, w2)?;
        let f = g.add(f, b2)?;
        let f = drop(g, f)?;
        let r = g.add(x, f)?;
        x = g.layer_norm(r, ln2_g, ln2_b, LAYER_NORM_EPS)?;
    }
    Ok((x, attention))
}
