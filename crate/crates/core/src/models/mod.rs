//! Next-step predictors `P(y | x₀…x_t)` over course-node tokens.
//!
//! Both architectures share the same outer shape: an embedding table with a
//! zero padding row, a stack of sequence layers that only look backwards in
//! time, and an output head producing one logit per token (column 0 is the
//! padding token and is never predicted). With `tied_output`, the head
//! reuses the embedding table as its output matrix after a linear
//! projection to the embedding width.

mod checkpoint;
mod lstm;
mod transformer;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use transformer::positional_encoding;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Lstm,
    Transformer,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(Architecture::Lstm),
            "transformer" => Ok(Architecture::Transformer),
            other => Err(Error::config(format!("unknown architecture `{other}`"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Lstm => "lstm",
            Architecture::Transformer => "transformer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub max_seq_len: usize,
    /// Main layer width.
    pub d_model: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub ffn_hidden: usize,
    /// Number of real tokens |T|; the model emits |T|+1 logits.
    pub vocab_size: usize,
    pub d_embed: usize,
    pub tied_output: bool,
    pub confidence_beta: f64,
    pub dropout_rate: f64,
    pub recurrent_dropout_rate: f64,
}

pub const DEFAULT_BETA: f64 = 0.1;
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    /// Two 128-wide LSTM layers over length-256 sequences.
    pub fn lstm(vocab_size: usize) -> Self {
        ModelConfig {
            architecture: Architecture::Lstm,
            max_seq_len: 256,
            d_model: 128,
            layer_count: 2,
            head_count: 0,
            ffn_hidden: 0,
            vocab_size,
            d_embed: 128,
            tied_output: false,
            confidence_beta: DEFAULT_BETA,
            dropout_rate: 0.0,
            recurrent_dropout_rate: 0.2,
        }
    }

    /// Two 128-wide post-norm blocks with 8 heads over length-256 sequences.
    pub fn transformer(vocab_size: usize) -> Self {
        ModelConfig {
            architecture: Architecture::Transformer,
            max_seq_len: 256,
            d_model: 128,
            layer_count: 2,
            head_count: 8,
            ffn_hidden: 512,
            vocab_size,
            d_embed: 128,
            tied_output: false,
            confidence_beta: DEFAULT_BETA,
            dropout_rate: 0.1,
            recurrent_dropout_rate: 0.0,
        }
    }

    pub fn for_architecture(arch: Architecture, vocab_size: usize) -> Self {
        match arch {
            Architecture::Lstm => Self::lstm(vocab_size),
            Architecture::Transformer => Self::transformer(vocab_size),
        }
    }

    /// Shrinks every width to `d` (FFN to `4d`), keeping everything else.
    pub fn with_width(mut self, d: usize) -> Self {
        self.d_model = d;
        self.d_embed = d;
        if self.architecture == Architecture::Transformer {
            self.ffn_hidden = 4 * d;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_embed == 0 || self.layer_count == 0 {
            return fail("vocab size, widths and layer count must be positive".into());
        }
        if self.max_seq_len < 2 {
            return fail("max sequence length must be at least 2".into());
        }
        if !(self.confidence_beta.is_finite() && self.confidence_beta >= 0.0) {
            return fail(format!("confidence penalty weight {} must be finite and >= 0", self.confidence_beta));
        }
        for rate in [self.dropout_rate, self.recurrent_dropout_rate] {
            crate::graph::check_rate(rate)?;
        }
        match self.architecture {
            Architecture::Transformer => {
                if self.head_count == 0 || self.d_model % self.head_count != 0 {
                    return fail(format!(
                        "d_model {} is not divisible by head count {}",
                        self.d_model, self.head_count
                    ));
                }
                if self.ffn_hidden == 0 {
                    return fail("ffn_hidden must be positive".into());
                }
                if self.d_embed != self.d_model {
                    return fail("transformer embeddings must be d_model wide".into());
                }
            }
            Architecture::Lstm => {}
        }
        if self.tied_output && self.d_embed != self.d_model {
            return fail(format!(
                "tied output needs d_embed == d_model (got {} and {})",
                self.d_embed, self.d_model
            ));
        }
        Ok(())
    }

    /// Short label such as `lstm+tied+penalty`.
    pub fn label(&self) -> String {
        let mut s = self.architecture.to_string();
        if self.tied_output {
            s.push_str("+tied");
        }
        if self.confidence_beta > 0.0 {
            s.push_str("+penalty");
        }
        s
    }
}

/// Named parameter tensors in construction order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Uniform Glorot initialization for a `fan_in × fan_out` matrix.
pub fn glorot(shape: &[usize], rng: &mut RngState) -> Tensor {
    let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-bound, bound)).collect()).expect("shape")
}

/// Token IDs laid out `[batch, len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, len: usize, tokens: Vec<usize>) -> Result<Self> {
        if batch == 0 || len == 0 || tokens.len() != batch * len {
            return Err(Error::shape("token batch", &[batch, len], &[tokens.len()]));
        }
        Ok(TokenBatch { batch, len, tokens })
    }

    pub fn single(tokens: &[usize]) -> Result<Self> {
        TokenBatch::new(1, tokens.len(), tokens.to_vec())
    }

    /// Inputs and shifted next-step targets for padded sequences. Trailing
    /// columns that are padding in every sequence are dropped; targets are
    /// `tokens[s+1]`, 0 where there is no next token.
    pub fn with_targets(seqs: &[&[usize]]) -> Result<(TokenBatch, Vec<usize>)> {
        let used = seqs
            .iter()
            .map(|s| s.iter().rposition(|&t| t != 0).map_or(1, |p| p + 1))
            .max()
            .ok_or_else(|| Error::config("empty batch"))?;
        let mut tokens = Vec::with_capacity(seqs.len() * used);
        let mut targets = Vec::with_capacity(seqs.len() * used);
        for s in seqs {
            tokens.extend_from_slice(&s[..used]);
            targets.extend((1..=used).map(|i| s.get(i).copied().unwrap_or(0)));
        }
        Ok((TokenBatch::new(seqs.len(), used, tokens)?, targets))
    }

    pub fn key_valid(&self) -> Vec<bool> {
        self.tokens.iter().map(|&t| t != 0).collect()
    }
}

#[derive(Clone, Debug)]
enum Body {
    Lstm(Vec<lstm::LstmLayerIds>),
    Transformer(Vec<transformer::BlockIds>),
}

#[derive(Clone, Copy, Debug)]
struct HeadIds {
    /// `[d_model, |T|+1]`, absent when tied.
    weight: Option<usize>,
    /// `[d_model, d_embed]`, present when tied.
    projection: Option<usize>,
    bias: usize,
}

/// Result of one recorded forward pass.
pub struct Forward {
    /// `[batch, len, |T|+1]`.
    pub logits: Var,
    /// Attention nodes, one per block (empty for LSTMs).
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct TrajectoryModel {
    config: ModelConfig,
    params: ParamStore,
    embedding: usize,
    body: Body,
    head: HeadIds,
}

impl TrajectoryModel {
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let v1 = config.vocab_size + 1;
        let mut table = glorot(&[v1, config.d_embed], rng);
        table.data_mut()[..config.d_embed].fill(0.0);
        let embedding = params.add("embedding", table);
        let body = match config.architecture {
            Architecture::Lstm => Body::Lstm(lstm::init(&config, &mut params, rng)),
            Architecture::Transformer => Body::Transformer(transformer::init(&config, &mut params, rng)),
        };
        let head = if config.tied_output {
            HeadIds {
                weight: None,
                projection: Some(params.add("head.projection", glorot(&[config.d_model, config.d_embed], rng))),
                bias: params.add("head.bias", Tensor::zeros(&[v1])),
            }
        } else {
            let mut w = glorot(&[config.d_model, v1], rng);
            for row in w.data_mut().chunks_mut(v1) {
                row[0] = 0.0;
            }
            HeadIds {
                weight: Some(params.add("head.weight", w)),
                projection: None,
                bias: params.add("head.bias", Tensor::zeros(&[v1])),
            }
        };
        Ok(TrajectoryModel {
            config,
            params,
            embedding,
            body,
            head,
        })
    }

    /// Rebuilds a model from stored tensors; names and shapes must match
    /// what `config` would construct.
    pub fn from_params(config: ModelConfig, stored: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = TrajectoryModel::new(config, &mut RngState::new(0))?;
        if stored.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                stored.len()
            )));
        }
        for (id, (name, tensor)) in stored.into_iter().enumerate() {
            let expect = model.params.get(id);
            if model.params.name(id) != name || expect.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {id} is `{name}` {:?}, expected `{}` {:?}",
                    tensor.shape(),
                    model.params.name(id),
                    expect.shape()
                )));
            }
            *model.params.get_mut(id) = tensor;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding_table(&self) -> &Tensor {
        self.params.get(self.embedding)
    }

    /// The effective `[d_embed or d_model, |T|+1]` output matrix. When tied
    /// this is the transpose of the embedding table itself.
    pub fn output_matrix(&self) -> Tensor {
        match self.head.weight {
            Some(w) => self.params.get(w).clone(),
            None => self.embedding_table().transpose().expect("2-D"),
        }
    }

    pub fn is_tied(&self) -> bool {
        self.head.weight.is_none()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Parameters that training can change: everything except the padding
    /// row of the embedding, the padding column of an untied output matrix,
    /// and the padding entry of the output bias.
    pub fn trainable_parameter_count(&self) -> usize {
        let mut n = self.parameter_count() - self.config.d_embed - 1;
        if self.head.weight.is_some() {
            n -= self.config.d_model;
        }
        n
    }

    /// Records a forward pass. `dropout` enables training mode, drawing
    /// dropout masks from the given stream.
    pub fn forward(&self, g: &mut Graph, batch: &TokenBatch, mut dropout: Option<&mut RngState>) -> Result<Forward> {
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t > self.config.vocab_size) {
            return Err(Error::Vocab(format!(
                "token {bad} outside model vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let table = g.param(self.embedding, self.params.get(self.embedding));
        let x = g.embedding(table, &batch.tokens, &[batch.batch, batch.len])?;
        let (h, attention) = match &self.body {
            Body::Lstm(layers) => (lstm::forward(self, layers, g, x, batch, dropout.as_deref_mut())?, Vec::new()),
            Body::Transformer(blocks) => transformer::forward(self, blocks, g, x, batch, dropout.as_deref_mut())?,
        };
        let logits = self.output_logits(g, h, table)?;
        Ok(Forward { logits, attention })
    }

    fn output_logits(&self, g: &mut Graph, h: Var, table: Var) -> Result<Var> {
        let bias = g.param(self.head.bias, self.params.get(self.head.bias));
        let z = match (self.head.weight, self.head.projection) {
            (Some(w), _) => {
                let w = g.param(w, self.params.get(w));
                g.matmul(h, w)?
            }
            (None, Some(p)) => {
                let p = g.param(p, self.params.get(p));
                let projected = g.matmul(h, p)?;
                g.matmul_t(projected, table)?
            }
            (None, None) => unreachable!("head has either a weight or a projection"),
        };
        g.add(z, bias)
    }

    /// Inference-mode logits `[batch, len, |T|+1]`.
    pub fn logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, None)?;
        Ok(g.take_value(out.logits))
    }

    /// Attention weights `[batch, heads, len, len]` for every block.
    pub fn attention_weights(&self, batch: &TokenBatch) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, None)?;
        out.attention
            .iter()
            .map(|&v| {
                let (w, dims) = g.attention_weights(v).expect("attention node");
                Tensor::new(&dims, w.to_vec())
            })
            .collect()
    }

    /// Replaces every parameter with `f(name, tensor)`; used by tests that
    /// construct models with specific weights.
    pub fn map_params(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for id in 0..self.params.len() {
            let name = self.params.name(id).to_string();
            f(&name, self.params.get_mut(id));
        }
    }
}
