//! Architecture-level properties: causality, padding invariance, degenerate
//! weight settings with hand-traceable outputs, and end-to-end gradients.

use proptest::prelude::*;
use trajnet::gradcheck::grad_check;
use trajnet::graph::Graph;
use trajnet::models::{positional_encoding, Architecture, ModelConfig, TokenBatch, TrajectoryModel};
use trajnet::{RngState, Tensor};

fn small(arch: Architecture, vocab: usize, tied: bool, layers: usize) -> ModelConfig {
    let mut c = ModelConfig::for_architecture(arch, vocab).with_width(4);
    c.head_count = 2;
    c.layer_count = layers;
    c.max_seq_len = 16;
    c.tied_output = tied;
    c
}

fn build(c: ModelConfig, seed: u64) -> TrajectoryModel {
    TrajectoryModel::new(c, &mut RngState::new(seed)).unwrap()
}

fn arch_strategy() -> impl Strategy<Value = Architecture> {
    prop_oneof![Just(Architecture::Lstm), Just(Architecture::Transformer)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn future_tokens_never_change_past_logits(
        arch in arch_strategy(),
        tied in any::<bool>(),
        tokens in prop::collection::vec(1usize..=6, 2..10),
        cut in 0usize..9,
        seed in 0u64..500,
    ) {
        let s = cut % (tokens.len() - 1);
        let model = build(small(arch, 6, tied, 2), seed);
        let base = model.logits(&TokenBatch::single(&tokens).unwrap()).unwrap();
        let mut rng = RngState::new(seed + 1);
        let mut changed = tokens.clone();
        for t in &mut changed[s + 1..] {
            *t = rng.below(7);
        }
        let other = model.logits(&TokenBatch::single(&changed).unwrap()).unwrap();
        let v1 = 7;
        prop_assert_eq!(&base.data()[..(s + 1) * v1], &other.data()[..(s + 1) * v1]);
    }

    #[test]
    fn trailing_padding_is_invisible(
        tokens in prop::collection::vec(1usize..=6, 1..8),
        pad in 1usize..6,
        seed in 0u64..500,
    ) {
        let model = build(small(Architecture::Transformer, 6, false, 2), seed);
        let short = model.logits(&TokenBatch::single(&tokens).unwrap()).unwrap();
        let mut padded = tokens.clone();
        padded.extend(std::iter::repeat(0).take(pad));
        let long = model.logits(&TokenBatch::single(&padded).unwrap()).unwrap();
        let n = tokens.len() * 7;
        for (a, b) in short.data().iter().zip(&long.data()[..n]) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn output_distributions_sum_to_one(
        arch in arch_strategy(),
        tokens in prop::collection::vec(0usize..=6, 1..8),
        seed in 0u64..500,
    ) {
        let mut tokens = tokens;
        tokens[0] = 1;
        let model = build(small(arch, 6, false, 2), seed);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &TokenBatch::single(&tokens).unwrap(), None).unwrap();
        let p = g.softmax(out.logits, None).unwrap();
        for row in g.value(p).data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn zero_lstm_emits_the_output_bias() {
    let mut model = build(small(Architecture::Lstm, 5, false, 2), 3);
    let bias: Vec<f64> = (0..6).map(|j| 0.1 * j as f64 - 0.2).collect();
    model.map_params(|name, t| {
        if name == "head.bias" {
            t.data_mut().copy_from_slice(&bias);
        } else {
            t.data_mut().fill(0.0);
        }
    });
    let logits = model.logits(&TokenBatch::new(2, 4, vec![1, 2, 3, 4, 5, 5, 0, 0]).unwrap()).unwrap();
    for pos in 0..8 {
        assert_eq!(&logits.data()[pos * 6..(pos + 1) * 6], bias.as_slice());
    }
}

fn reference_layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

#[test]
fn block_with_zero_output_projections_is_layer_norm() {
    // With W_o and the FFN output zeroed, each sublayer adds nothing and the
    // block reduces to two layer norms of its input.
    let mut model = build(small(Architecture::Transformer, 5, false, 1), 8);
    model.map_params(|name, t| {
        if name.ends_with("w_o") || name.contains("ffn") {
            t.data_mut().fill(0.0);
        }
    });
    let tokens = [1usize, 3, 5, 2];
    let logits = model.logits(&TokenBatch::single(&tokens).unwrap()).unwrap();
    let table = model.embedding_table();
    let pe = positional_encoding(4, 4);
    let w = model.params().by_name("head.weight").unwrap();
    let b = model.params().by_name("head.bias").unwrap();
    for (pos, &tok) in tokens.iter().enumerate() {
        let x: Vec<f64> = table.row(tok).iter().zip(pe.row(pos)).map(|(a, p)| a + p).collect();
        let h = reference_layer_norm(&reference_layer_norm(&x));
        for j in 0..6 {
            let expect = b.data()[j] + (0..4).map(|i| h[i] * w.at(i, j)).sum::<f64>();
            assert!((logits.data()[pos * 6 + j] - expect).abs() < 1e-12, "pos {pos} col {j}");
        }
    }
}

#[test]
fn identical_inputs_attend_uniformly_over_the_prefix() {
    let mut g = Graph::new();
    let row = [0.4, -1.2, 0.9, 0.3];
    let x = g.constant(Tensor::new(&[1, 5, 4], row.repeat(5)).unwrap());
    let att = g.attention(x, x, x, 2, None).unwrap();
    let (w, dims) = g.attention_weights(att).unwrap();
    assert_eq!(dims, [1, 2, 5, 5]);
    for h in 0..2 {
        for s in 0..5 {
            for j in 0..5 {
                let expect = if j <= s { 1.0 / (s + 1) as f64 } else { 0.0 };
                assert!((w[(h * 5 + s) * 5 + j] - expect).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn model_attention_maps_are_causal() {
    let model = build(small(Architecture::Transformer, 6, true, 2), 5);
    let maps = model.attention_weights(&TokenBatch::single(&[1, 4, 2, 6, 3]).unwrap()).unwrap();
    assert_eq!(maps.len(), 2);
    for m in maps {
        assert_eq!(m.shape(), &[1, 2, 5, 5]);
        for (r, row) in m.data().chunks(5).enumerate() {
            let s = r % 5;
            assert!(row[s + 1..].iter().all(|&v| v == 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

/// Loss over a 4×6 batch as a function of every model parameter.
fn end_to_end_check(arch: Architecture, tied: bool, training: bool) {
    let mut cfg = small(arch, 5, tied, 2);
    cfg.confidence_beta = 0.1;
    let model = build(cfg, 11);
    let mut rng = RngState::new(12);
    let mut tokens: Vec<usize> = (0..24).map(|_| 1 + rng.below(5)).collect();
    tokens[22] = 0;
    tokens[23] = 0;
    let seqs: Vec<&[usize]> = tokens.chunks(6).collect();
    let (batch, targets) = TokenBatch::with_targets(&seqs).unwrap();
    let inputs: Vec<Tensor> = model.params().tensors().to_vec();
    let report = grad_check(
        |g, vars| {
            for (id, &v) in vars.iter().enumerate() {
                g.bind_param(id, v);
            }
            let mut drop_rng = RngState::new(99);
            let out = model.forward(g, &batch, training.then_some(&mut drop_rng))?;
            g.cross_entropy(out.logits, &targets, 0.1)
        },
        &inputs,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{arch} tied={tied} training={training}: {:?}", report.worst);
}

#[test]
fn lstm_end_to_end_gradients() {
    end_to_end_check(Architecture::Lstm, false, false);
    end_to_end_check(Architecture::Lstm, true, true);
}

#[test]
fn transformer_end_to_end_gradients() {
    end_to_end_check(Architecture::Transformer, false, false);
    end_to_end_check(Architecture::Transformer, true, true);
}

#[test]
fn tied_embedding_gradient_sums_both_paths() {
    // Analytic gradient into L from one tied pass equals the gradient with
    // the input lookup and output matrix fed from two separate copies of L.
    let model = build(small(Architecture::Lstm, 5, true, 1), 2);
    let (batch, targets) = TokenBatch::with_targets(&[&[1, 3, 2, 5, 4][..]]).unwrap();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch, None).unwrap();
    let loss = g.cross_entropy(out.logits, &targets, 0.1).unwrap();
    g.backward(loss).unwrap();
    let shared = g.grad(g.param_var(0).unwrap()).unwrap();

    // Split route: the embedding leaf feeds only the lookup; a second copy
    // of L is consumed by the head through an untied-equivalent graph.
    let table = model.embedding_table().clone();
    let mut g = Graph::new();
    let in_copy = g.variable(table.clone());
    let out_copy = g.variable(table);
    g.bind_param(0, in_copy);
    let x = g.embedding(in_copy, &batch.tokens, &[1, batch.len]).unwrap();
    let p = model.params();
    let (w_in, w_rec, b) = (
        g.variable(p.by_name("lstm.0.w_in").unwrap().clone()),
        g.variable(p.by_name("lstm.0.w_rec").unwrap().clone()),
        g.variable(p.by_name("lstm.0.bias").unwrap().clone()),
    );
    let xp = g.matmul(x, w_in).unwrap();
    let xp = g.add(xp, b).unwrap();
    let h = g.lstm(xp, w_rec, None).unwrap();
    let proj = g.variable(p.by_name("head.projection").unwrap().clone());
    let bias = g.variable(p.by_name("head.bias").unwrap().clone());
    let z = g.matmul(h, proj).unwrap();
    let z = g.matmul_t(z, out_copy).unwrap();
    let z = g.add(z, bias).unwrap();
    let loss = g.cross_entropy(z, &targets, 0.1).unwrap();
    g.backward(loss).unwrap();
    let a = g.grad(in_copy).unwrap();
    let b = g.grad(out_copy).unwrap();
    for i in 0..shared.len() {
        assert!((shared.data()[i] - (a.data()[i] + b.data()[i])).abs() < 1e-14);
    }
    assert!(shared.row(0).iter().all(|&v| v == 0.0));
}
