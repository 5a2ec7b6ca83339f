//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation of one forward pass as a node that
//! owns its output value. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into a per-node buffer of the same shape as the
//! value. Besides the elementwise primitives, the tape carries fused
//! operations (embedding lookup, layer norm, causal multi-head attention,
//! an LSTM layer, and the confidence-penalized cross-entropy) whose
//! backward passes are written out by hand.
//!
//! A graph is single-use and confined to one thread.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, gemm, sigmoid, View};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Breakdown of a [`Graph::cross_entropy`] node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    /// Mean of `−log p_true` over included positions.
    pub cross_entropy: f64,
    /// Mean output entropy `H(p)` (nats) over included positions.
    pub entropy: f64,
    pub beta: f64,
    /// Number of included (non-padding) target positions.
    pub count: usize,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.cross_entropy - self.beta * self.entropy
    }
}

struct LstmCache {
    batch: usize,
    len: usize,
    hidden: usize,
    mask: Option<Vec<f64>>,
    /// Gate activations `[t][b][i f g o]`.
    gates: Vec<f64>,
    cells: Vec<f64>,
    tanh_cells: Vec<f64>,
    /// Masked previous hidden state per step, `[t][b][h]`.
    hm_prev: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Softmax(Var),
    MaskMul(Var, Vec<f64>),
    Sum(Var),
    Embedding {
        table: Var,
        tokens: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        len: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    Lstm {
        xproj: Var,
        w_rec: Var,
        cache: Box<LstmCache>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        log_probs: Vec<f64>,
        parts: LossParts,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<usize, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter tensor once per graph; repeated uses share a leaf
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(value.clone());
        self.params.insert(id, v);
        v
    }

    /// Makes later `param(id, _)` calls resolve to an existing leaf.
    pub fn bind_param(&mut self, id: usize, v: Var) {
        self.params.insert(id, v);
    }

    pub fn param_var(&self, id: usize) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Gradient accumulated into `v` by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn loss_parts(&self, v: Var) -> Option<LossParts> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { parts, .. } => Some(*parts),
            _ => None,
        }
    }

    /// Attention weights `[batch, heads, len, len]` recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<(&[f64], [usize; 4])> {
        match &self.nodes[v.0].op {
            Op::Attention {
                probs,
                heads,
                batch,
                len,
                ..
            } => Some((probs, [*batch, *heads, *len, *len])),
            _ => None,
        }
    }

    // ---------------------------------------------------------------- ops

    /// `a[..., k] · b[k, n] → [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).rows();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            View::rowmajor(self.value(a).data(), k),
            View::rowmajor(self.value(b).data(), n),
            0.0,
            &mut out,
            n,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), ng, "matmul")
    }

    /// `a[..., k] · b[n, k]ᵀ → [..., n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(Error::shape("matmul_t", sa, sb));
        }
        let (n, k) = (sb[0], sb[1]);
        let m = self.value(a).rows();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            View::rowmajor(self.value(a).data(), k),
            View::transposed(self.value(b).data(), k),
            0.0,
            &mut out,
            n,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, out)?, Op::MatMulT(a, b), ng, "matmul_t")
    }

    /// Orders a broadcast pair so the second operand's shape is a suffix of
    /// the first's.
    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.ends_with(sb) {
            Ok((a, b))
        } else if sb.ends_with(sa) {
            Ok((b, a))
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("add", a, b)?;
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for chunk in out.data_mut().chunks_mut(bd.len()) {
            for (o, &x) in chunk.iter_mut().zip(bd) {
                *o += x;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("mul", a, b)?;
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for chunk in out.data_mut().chunks_mut(bd.len()) {
            for (o, &x) in chunk.iter_mut().zip(bd) {
                *o *= x;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        Tensor::new(src.shape(), data).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| x * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng, "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng, "relu")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                message: format!("non-positive argument {bad}"),
            });
        }
        let out = self.map(a, f64::ln);
        let ng = self.needs(a);
        self.push(out, Op::Log(a), ng, "log")
    }

    /// Softmax over the last axis. `mask[j] == true` marks an allowed entry;
    /// the mask either matches `a` in size or covers a suffix of its shape
    /// and repeats over the leading axes.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        let n = x.last_dim();
        if let Some(m) = mask {
            if m.len() % n != 0 || x.len() % m.len() != 0 {
                return Err(Error::shape("softmax", x.shape(), &[m.len()]));
            }
        }
        let mut out = vec![0.0; x.len()];
        for (r, (row, o)) in x.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let ok = match mask {
                None => kernels::softmax_row(row, o, |_| true),
                Some(m) => {
                    let base = (r * n) % m.len();
                    kernels::softmax_row(row, o, |j| m[base + j])
                }
            };
            if !ok {
                return Err(Error::DegenerateMask { row: r });
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        let ng = self.needs(a);
        self.push(out, Op::Softmax(a), ng, "softmax")
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1−rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut RngState, training: bool) -> Result<Var> {
        check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).len(), rate, rng);
        self.mask_mul(x, mask)
    }

    /// Elementwise product with a constant of the same size.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let src = self.value(x);
        if mask.len() != src.len() {
            return Err(Error::shape("mask_mul", src.shape(), &[mask.len()]));
        }
        let data = src.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(src.shape(), data)?;
        let ng = self.needs(x);
        self.push(out, Op::MaskMul(x, mask), ng, "dropout")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    /// Row lookup: `tokens` laid out as `shape` → `[shape.., d]`. Row 0 of
    /// the table is the padding row and never receives gradient.
    pub fn embedding(&mut self, table: Var, tokens: &[usize], shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("embedding", t.shape(), &[0, 0]));
        }
        if shape.iter().product::<usize>() != tokens.len() {
            return Err(Error::shape("embedding", shape, &[tokens.len()]));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            if tok >= rows {
                return Err(Error::Vocab(format!(
                    "token {tok} out of range for table with {} tokens",
                    rows - 1
                )));
            }
            out.extend_from_slice(t.row(tok));
        }
        let mut oshape = shape.to_vec();
        oshape.push(d);
        let ng = self.needs(table);
        self.push(
            Tensor::new(&oshape, out)?,
            Op::Embedding {
                table,
                tokens: tokens.to_vec(),
            },
            ng,
            "embedding",
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(Error::shape("layer_norm", xv.shape(), self.value(p).shape()));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
            "layer_norm",
        )
    }

    /// Causal multi-head scaled dot-product attention over `[batch, len, d]`
    /// projections. Head `i` uses columns `i·d/h .. (i+1)·d/h`. Position `s`
    /// attends to keys `j ≤ s` with `key_valid[b·len + j]` set; scores are
    /// divided by `√⌊d/h⌋`. Output heads are concatenated back to width `d`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let shape = self.value(q).shape().to_vec();
        for other in [k, v] {
            if self.value(other).shape() != shape.as_slice() {
                return Err(Error::shape("attention", &shape, self.value(other).shape()));
            }
        }
        if shape.len() != 3 {
            return Err(Error::shape("attention", &shape, &[0, 0, 0]));
        }
        let (batch, len, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "model width {d} is not divisible by head count {heads}"
            )));
        }
        if let Some(kv) = key_valid {
            if kv.len() != batch * len {
                return Err(Error::shape("attention", &shape, &[kv.len()]));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * len * len];
        let mut out = vec![0.0; batch * len * d];
        let mut scores = vec![0.0; len * len];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * len * d + h * dh;
                gemm(
                    len,
                    dh,
                    len,
                    View { data: &qd[off..], rs: d, cs: 1 },
                    View { data: &kd[off..], rs: 1, cs: d },
                    0.0,
                    &mut scores,
                    len,
                );
                let p = &mut probs[(b * heads + h) * len * len..][..len * len];
                for i in 0..len {
                    let row: Vec<f64> = scores[i * len..(i + 1) * len].iter().map(|s| s * scale).collect();
                    let allowed = |j: usize| j <= i && key_valid.map_or(true, |kv| kv[b * len + j]);
                    if !kernels::softmax_row(&row, &mut p[i * len..(i + 1) * len], allowed) {
                        return Err(Error::DegenerateMask {
                            row: (b * heads + h) * len + i,
                        });
                    }
                }
                gemm(
                    len,
                    len,
                    dh,
                    View::rowmajor(p, len),
                    View { data: &vd[off..], rs: d, cs: 1 },
                    0.0,
                    &mut out[off..],
                    d,
                );
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                len,
                scale,
                probs,
            },
            ng,
            "attention",
        )
    }

    /// One LSTM layer over precomputed input projections.
    ///
    /// `xproj` is `[batch, len, 4h]` holding `x·W_in + b` with gate blocks in
    /// the order input, forget, cell, output. `w_rec` is `[h, 4h]`. When
    /// `mask` (`[batch, h]`) is given, the previous hidden state is
    /// multiplied by it before the recurrent product at every step. States
    /// start at zero. Output is `[batch, len, h]`.
    pub fn lstm(&mut self, xproj: Var, w_rec: Var, mask: Option<Vec<f64>>) -> Result<Var> {
        let xs = self.value(xproj).shape().to_vec();
        let ws = self.value(w_rec).shape().to_vec();
        if xs.len() != 3 || ws.len() != 2 || ws[1] != 4 * ws[0] || xs[2] != ws[1] {
            return Err(Error::shape("lstm", &xs, &ws));
        }
        let (batch, len, hidden) = (xs[0], xs[1], ws[0]);
        let g4 = 4 * hidden;
        if let Some(m) = &mask {
            if m.len() != batch * hidden {
                return Err(Error::shape("lstm", &[batch, hidden], &[m.len()]));
            }
        }
        let x = self.value(xproj).data();
        let w = self.value(w_rec).data();
        let mut gates = vec![0.0; len * batch * g4];
        let mut cells = vec![0.0; len * batch * hidden];
        let mut tanh_cells = vec![0.0; len * batch * hidden];
        let mut hm_prev = vec![0.0; len * batch * hidden];
        let mut out = vec![0.0; batch * len * hidden];
        let mut h_prev = vec![0.0; batch * hidden];
        for t in 0..len {
            let hm = &mut hm_prev[t * batch * hidden..][..batch * hidden];
            hm.copy_from_slice(&h_prev);
            if let Some(m) = &mask {
                for (a, b) in hm.iter_mut().zip(m) {
                    *a *= b;
                }
            }
            let a = &mut gates[t * batch * g4..][..batch * g4];
            for b in 0..batch {
                a[b * g4..(b + 1) * g4].copy_from_slice(&x[(b * len + t) * g4..][..g4]);
            }
            gemm(batch, hidden, g4, View::rowmajor(hm, hidden), View::rowmajor(w, g4), 1.0, a, g4);
            for b in 0..batch {
                let ga = &mut a[b * g4..(b + 1) * g4];
                for j in 0..hidden {
                    let i = sigmoid(ga[j]);
                    let f = sigmoid(ga[hidden + j]);
                    let g = ga[2 * hidden + j].tanh();
                    let o = sigmoid(ga[3 * hidden + j]);
                    ga[j] = i;
                    ga[hidden + j] = f;
                    ga[2 * hidden + j] = g;
                    ga[3 * hidden + j] = o;
                    let c_prev = if t == 0 {
                        0.0
                    } else {
                        cells[((t - 1) * batch + b) * hidden + j]
                    };
                    let c = f * c_prev + i * g;
                    let tc = c.tanh();
                    let idx = (t * batch + b) * hidden + j;
                    cells[idx] = c;
                    tanh_cells[idx] = tc;
                    let h = o * tc;
                    h_prev[b * hidden + j] = h;
                    out[(b * len + t) * hidden + j] = h;
                }
            }
        }
        let ng = self.needs(xproj) || self.needs(w_rec);
        self.push(
            Tensor::new(&[batch, len, hidden], out)?,
            Op::Lstm {
                xproj,
                w_rec,
                cache: Box::new(LstmCache {
                    batch,
                    len,
                    hidden,
                    mask,
                    gates,
                    cells,
                    tanh_cells,
                    hm_prev,
                }),
            },
            ng,
            "lstm",
        )
    }

    /// Mean next-step loss `−log p_true + β Σ_j p_j log p_j` over positions
    /// whose target is nonzero. Column 0 (padding) is excluded from the
    /// softmax, so `p` ranges over real tokens only.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], beta: f64) -> Result<Var> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::config(format!("confidence penalty weight {beta} must be finite and >= 0")));
        }
        let lv = self.value(logits);
        let classes = lv.last_dim();
        if classes < 2 {
            return Err(Error::shape("cross_entropy", lv.shape(), &[2]));
        }
        if lv.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut log_probs = vec![0.0; lv.len()];
        let (mut ce, mut ent, mut count) = (0.0, 0.0, 0usize);
        for (r, &y) in targets.iter().enumerate() {
            if y == 0 {
                continue;
            }
            if y >= classes {
                return Err(Error::Vocab(format!("target {y} out of range for {} tokens", classes - 1)));
            }
            let row = lv.row(r);
            let lp = &mut log_probs[r * classes..(r + 1) * classes];
            let max = row[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row[1..].iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let mut h = 0.0;
            for j in 1..classes {
                lp[j] = row[j] - lse;
                h -= lp[j].exp() * lp[j];
            }
            ce -= lp[y];
            ent += h;
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyTargets);
        }
        let parts = LossParts {
            cross_entropy: ce / count as f64,
            entropy: ent / count as f64,
            beta,
            count,
        };
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(parts.total()),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                log_probs,
                parts,
            },
            ng,
            "cross_entropy",
        )
    }

    // ----------------------------------------------------------- backward

    /// Seeds `d output / d output = 1` and propagates to every node that
    /// needs a gradient. `output` must be a single-element tensor.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", self.value(output).shape(), &[1]));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backward_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Ops borrow their inputs' values while writing inputs' grads; the
        // two live in separate vectors.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();
        let grads = &mut self.grads;
        macro_rules! acc {
            ($v:expr) => {
                grad_buf(grads, &nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (k, n) = (shape(*b)[0], shape(*b)[1]);
                let m = g.len() / n;
                if let Some(da) = acc!(*a) {
                    gemm(m, n, k, View::rowmajor(g, n), View::transposed(val(*b), n), 1.0, da, k);
                }
                if let Some(db) = acc!(*b) {
                    gemm(k, m, n, View::transposed(val(*a), k), View::rowmajor(g, n), 1.0, db, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (n, k) = (shape(*b)[0], shape(*b)[1]);
                let m = g.len() / n;
                if let Some(da) = acc!(*a) {
                    gemm(m, n, k, View::rowmajor(g, n), View::rowmajor(val(*b), k), 1.0, da, k);
                }
                if let Some(db) = acc!(*b) {
                    gemm(n, m, k, View::transposed(g, n), View::rowmajor(val(*a), k), 1.0, db, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(*b) {
                    let w = db.len();
                    for chunk in g.chunks(w) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let w = bv.len();
                if let Some(da) = acc!(*a) {
                    for (dchunk, gchunk) in da.chunks_mut(w).zip(g.chunks(w)) {
                        for ((d, &gg), &bb) in dchunk.iter_mut().zip(gchunk).zip(bv) {
                            *d += gg * bb;
                        }
                    }
                }
                if let Some(db) = acc!(*b) {
                    for (gchunk, achunk) in g.chunks(w).zip(av.chunks(w)) {
                        for ((d, &gg), &aa) in db.iter_mut().zip(gchunk).zip(achunk) {
                            *d += gg * aa;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = acc!(*a) {
                    for (d, &gg) in da.iter_mut().zip(g) {
                        *d += gg * c;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(da) = acc!(*a) {
                    for ((d, &gg), &s) in da.iter_mut().zip(g).zip(y) {
                        *d += gg * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(da) = acc!(*a) {
                    for ((d, &gg), &t) in da.iter_mut().zip(g).zip(y) {
                        *d += gg * (1.0 - t * t);
                    }
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                if let Some(da) = acc!(*a) {
                    for ((d, &gg), &xx) in da.iter_mut().zip(g).zip(x) {
                        if xx > 0.0 {
                            *d += gg;
                        }
                    }
                }
            }
            Op::Log(a) => {
                let x = val(*a);
                if let Some(da) = acc!(*a) {
                    for ((d, &gg), &xx) in da.iter_mut().zip(g).zip(x) {
                        *d += gg / xx;
                    }
                }
            }
            Op::Softmax(a) => {
                let p = node.value.data();
                let n = node.value.last_dim();
                if let Some(da) = acc!(*a) {
                    for ((dchunk, pchunk), gchunk) in da.chunks_mut(n).zip(p.chunks(n)).zip(g.chunks(n)) {
                        kernels::softmax_row_backward(pchunk, gchunk, dchunk);
                    }
                }
            }
            Op::MaskMul(a, mask) => {
                if let Some(da) = acc!(*a) {
                    for ((d, &gg), &m) in da.iter_mut().zip(g).zip(mask) {
                        *d += gg * m;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = acc!(*a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Embedding { table, tokens } => {
                let d = shape(*table)[1];
                if let Some(dt) = acc!(*table) {
                    for (&tok, gchunk) in tokens.iter().zip(g.chunks(d)) {
                        if tok != 0 {
                            add_into(&mut dt[tok * d..(tok + 1) * d], gchunk);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = shape(*gain)[0];
                let gv = val(*gain);
                if let Some(dg) = acc!(*gain) {
                    for (gchunk, hchunk) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gg), &h) in dg.iter_mut().zip(gchunk).zip(hchunk) {
                            *o += gg * h;
                        }
                    }
                }
                if let Some(db) = acc!(*bias) {
                    for gchunk in g.chunks(d) {
                        add_into(db, gchunk);
                    }
                }
                if let Some(dx) = acc!(*x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, (dchunk, (gchunk, hchunk))) in dx
                        .chunks_mut(d)
                        .zip(g.chunks(d).zip(xhat.chunks(d)))
                        .enumerate()
                    {
                        for j in 0..d {
                            dxhat[j] = gchunk[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(hchunk).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dchunk[j] += rstd[r] * (dxhat[j] - m1 - hchunk[j] * m2);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                len,
                scale,
                probs,
            } => {
                let (heads, batch, len, scale) = (*heads, *batch, *len, *scale);
                let d = shape(*q)[2];
                let dh = d / heads;
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; len * len];
                let mut ds = vec![0.0; len * len];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * len * d + h * dh;
                        let p = &probs[(b * heads + h) * len * len..][..len * len];
                        let go = View { data: &g[off..], rs: d, cs: 1 };
                        gemm(len, dh, len, go, View { data: &vd[off..], rs: 1, cs: d }, 0.0, &mut dp, len);
                        gemm(len, len, dh, View::transposed(p, len), go, 1.0, &mut dv[off..], d);
                        ds.iter_mut().for_each(|x| *x = 0.0);
                        for i in 0..len {
                            let r = i * len..(i + 1) * len;
                            kernels::softmax_row_backward(&p[r.clone()], &dp[r.clone()], &mut ds[r]);
                        }
                        ds.iter_mut().for_each(|x| *x *= scale);
                        gemm(
                            len,
                            len,
                            dh,
                            View::rowmajor(&ds, len),
                            View { data: &kd[off..], rs: d, cs: 1 },
                            1.0,
                            &mut dq[off..],
                            d,
                        );
                        gemm(
                            len,
                            len,
                            dh,
                            View::transposed(&ds, len),
                            View { data: &qd[off..], rs: d, cs: 1 },
                            1.0,
                            &mut dk[off..],
                            d,
                        );
                    }
                }
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(buf) = acc!(var) {
                        add_into(buf, &grad);
                    }
                }
            }
            Op::Lstm { xproj, w_rec, cache } => {
                let LstmCache {
                    batch,
                    len,
                    hidden,
                    mask,
                    gates,
                    cells,
                    tanh_cells,
                    hm_prev,
                } = cache.as_ref();
                let (batch, len, hidden) = (*batch, *len, *hidden);
                let g4 = 4 * hidden;
                let w = val(*w_rec);
                let mut da_all = vec![0.0; len * batch * g4];
                let mut dh_next = vec![0.0; batch * hidden];
                let mut dc_next = vec![0.0; batch * hidden];
                let mut dhm = vec![0.0; batch * hidden];
                for t in (0..len).rev() {
                    let ga = &gates[t * batch * g4..][..batch * g4];
                    let da = &mut da_all[t * batch * g4..][..batch * g4];
                    for b in 0..batch {
                        for j in 0..hidden {
                            let idx = (t * batch + b) * hidden + j;
                            let gb = &ga[b * g4..];
                            let (i, f, gg, o) = (gb[j], gb[hidden + j], gb[2 * hidden + j], gb[3 * hidden + j]);
                            let tc = tanh_cells[idx];
                            let c_prev = if t == 0 { 0.0 } else { cells[idx - batch * hidden] };
                            let dh = g[(b * len + t) * hidden + j] + dh_next[b * hidden + j];
                            let dc = dh * o * (1.0 - tc * tc) + dc_next[b * hidden + j];
                            let dab = &mut da[b * g4..];
                            dab[j] = dc * gg * i * (1.0 - i);
                            dab[hidden + j] = dc * c_prev * f * (1.0 - f);
                            dab[2 * hidden + j] = dc * i * (1.0 - gg * gg);
                            dab[3 * hidden + j] = dh * tc * o * (1.0 - o);
                            dc_next[b * hidden + j] = dc * f;
                        }
                    }
                    if t > 0 {
                        gemm(batch, g4, hidden, View::rowmajor(da, g4), View::transposed(w, g4), 0.0, &mut dhm, hidden);
                        match mask {
                            Some(m) => {
                                for ((dn, &x), &mm) in dh_next.iter_mut().zip(&dhm).zip(m) {
                                    *dn = x * mm;
                                }
                            }
                            None => dh_next.copy_from_slice(&dhm),
                        }
                    }
                }
                if let Some(dw) = acc!(*w_rec) {
                    gemm(
                        hidden,
                        len * batch,
                        g4,
                        View::transposed(hm_prev, hidden),
                        View::rowmajor(&da_all, g4),
                        1.0,
                        dw,
                        g4,
                    );
                }
                if let Some(dx) = acc!(*xproj) {
                    for t in 0..len {
                        for b in 0..batch {
                            add_into(
                                &mut dx[(b * len + t) * g4..][..g4],
                                &da_all[(t * batch + b) * g4..][..g4],
                            );
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                log_probs,
                parts,
            } => {
                let classes = shape(*logits)[shape(*logits).len() - 1];
                let scale = g[0] / parts.count as f64;
                let beta = parts.beta;
                if let Some(dl) = acc!(*logits) {
                    for (r, &y) in targets.iter().enumerate() {
                        if y == 0 {
                            continue;
                        }
                        let lp = &log_probs[r * classes..(r + 1) * classes];
                        let h: f64 = -lp[1..].iter().map(|l| l.exp() * l).sum::<f64>();
                        let drow = &mut dl[r * classes..(r + 1) * classes];
                        for j in 1..classes {
                            let p = lp[j].exp();
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            drow[j] += scale * (p - onehot + beta * p * (lp[j] + h));
                        }
                    }
                }
            }
        }
        self.nodes = nodes;
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let n = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} must lie in [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout multiplier: 0 with probability `rate`, else `1/(1−rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut RngState) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect()
}
