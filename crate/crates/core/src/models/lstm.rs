//! Stacked LSTM body.

use super::{glorot, ModelConfig, ParamStore, TokenBatch, TrajectoryModel};
use crate::error::Result;
use crate::graph::{dropout_mask, Graph, Var};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(super) struct LstmLayerIds {
    w_in: usize,
    w_rec: usize,
    bias: usize,
}

pub(super) fn init(config: &ModelConfig, params: &mut ParamStore, rng: &mut RngState) -> Vec<LstmLayerIds> {
    let d = config.d_model;
    (0..config.layer_count)
        .map(|l| {
            let d_in = if l == 0 { config.d_embed } else { d };
            let mut bias = Tensor::zeros(&[4 * d]);
            // Gate order i, f, g, o; the forget gate starts open.
            bias.data_mut()[d..2 * d].fill(1.0);
            LstmLayerIds {
                w_in: params.add(format!("lstm.{l}.w_in"), glorot(&[d_in, 4 * d], rng)),
                w_rec: params.add(format!("lstm.{l}.w_rec"), glorot(&[d, 4 * d], rng)),
                bias: params.add(format!("lstm.{l}.bias"), bias),
            }
        })
        .collect()
}

pub(super) fn forward(
    model: &TrajectoryModel,
    layers: &[LstmLayerIds],
    g: &mut Graph,
    mut x: Var,
    batch: &TokenBatch,
    mut dropout: Option<&mut RngState>,
) -> Result<Var> {
    let cfg = model.config();
    let p = model.params();
    for ids in layers {
        let w_in = g.param(ids.w_in, p.get(ids.w_in));
        let w_rec = g.param(ids.w_rec, p.get(ids.w_rec));
        let bias = g.param(ids.bias, p.get(ids.bias));
        let proj = g.matmul(x, w_in)?;
        let proj = g.add(proj, bias)?;
        // One recurrent mask per sequence, shared across time steps.
        let mask = match dropout.as_deref_mut() {
            Some(rng) if cfg.recurrent_dropout_rate > 0.0 => {
                Some(dropout_mask(batch.batch * cfg.d_model, cfg.recurrent_dropout_rate, rng))
            }
            _ => None,
        };
        x = g.lstm(proj, w_rec, mask)?;
        if let Some(rng) = dropout.as_deref_mut() {
            x = g.dropout(x, cfg.dropout_rate, rng, true)?;
        }
    }
    Ok(x)
}
