//! Reverse-mode gradients of every differentiable op against central
//! finite differences, on randomized shapes.

use proptest::prelude::*;
use trajnet::gradcheck::grad_check;
use trajnet::graph::{dropout_mask, Graph, Var};
use trajnet::{Result, RngState, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Contracts an arbitrary-shaped output to a scalar with fixed random
/// weights so every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = random(&shape, &mut RngState::new(seed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check<F>(f: F, inputs: &[Tensor])
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = grad_check(f, inputs, H, TOL).unwrap();
    assert!(report.passed(), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matmul_and_transposed(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let a = random(&[2, m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let bt = random(&[n, k], &mut rng);
        check(|g, v| { let y = g.matmul(v[0], v[1])?; weighted_sum(g, y, seed) }, &[a.clone(), b]);
        check(|g, v| { let y = g.matmul_t(v[0], v[1])?; weighted_sum(g, y, seed) }, &[a, bt]);
    }

    #[test]
    fn broadcast_add_and_mul(rows in 1usize..5, cols in 1usize..6, seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let a = random(&[rows, cols], &mut rng);
        let b = random(&[cols], &mut rng);
        check(|g, v| { let y = g.add(v[0], v[1])?; weighted_sum(g, y, seed) }, &[a.clone(), b.clone()]);
        check(|g, v| { let y = g.mul(v[1], v[0])?; weighted_sum(g, y, seed) }, &[a, b]);
    }

    #[test]
    fn unary_ops(n in 1usize..8, seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let x = random(&[n], &mut rng);
        let pos = Tensor::new(&[n], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        check(|g, v| { let y = g.sigmoid(v[0])?; weighted_sum(g, y, seed) }, &[x.clone()]);
        check(|g, v| { let y = g.tanh(v[0])?; weighted_sum(g, y, seed) }, &[x.clone()]);
        check(|g, v| { let y = g.relu(v[0])?; weighted_sum(g, y, seed) }, &[x.clone()]);
        check(|g, v| { let y = g.scale(v[0], -0.7)?; weighted_sum(g, y, seed) }, &[x]);
        check(|g, v| { let y = g.log(v[0])?; weighted_sum(g, y, seed) }, &[pos]);
    }

    #[test]
    fn masked_softmax(rows in 1usize..4, n in 2usize..6, seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let x = random(&[rows, n], &mut rng);
        // Keep entry 0 of every row allowed so no row is degenerate.
        let mask: Vec<bool> = (0..rows * n).map(|i| i % n == 0 || rng.next_f64() < 0.6).collect();
        check(|g, v| { let y = g.softmax(v[0], None)?; weighted_sum(g, y, seed) }, &[x.clone()]);
        check(|g, v| { let y = g.softmax(v[0], Some(&mask))?; weighted_sum(g, y, seed) }, &[x]);
    }

    #[test]
    fn layer_norm(rows in 1usize..4, d in 2usize..7, seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let x = random(&[rows, d], &mut rng);
        let gain = random(&[d], &mut rng);
        let bias = random(&[d], &mut rng);
        check(|g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted_sum(g, y, seed) }, &[x, gain, bias]);
    }

    #[test]
    fn causal_attention(batch in 1usize..3, len in 1usize..6, heads in 1usize..3, seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let d = 2 * heads;
        let q = random(&[batch, len, d], &mut rng);
        let k = random(&[batch, len, d], &mut rng);
        let v = random(&[batch, len, d], &mut rng);
        // Position 0 always valid; later keys may be padding.
        let valid: Vec<bool> = (0..batch * len).map(|i| i % len == 0 || rng.next_f64() < 0.7).collect();
        check(
            |g, x| { let y = g.attention(x[0], x[1], x[2], heads, Some(&valid))?; weighted_sum(g, y, seed) },
            &[q, k, v],
        );
    }

    #[test]
    fn lstm_layer(batch in 1usize..3, len in 1usize..5, hidden in 1usize..4, seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let x = random(&[batch, len, 4 * hidden], &mut rng);
        let w = random(&[hidden, 4 * hidden], &mut rng);
        let mask = dropout_mask(batch * hidden, 0.3, &mut rng);
        check(|g, v| { let y = g.lstm(v[0], v[1], None)?; weighted_sum(g, y, seed) }, &[x.clone(), w.clone()]);
        check(|g, v| { let y = g.lstm(v[0], v[1], Some(mask.clone()))?; weighted_sum(g, y, seed) }, &[x, w]);
    }

    #[test]
    fn penalized_cross_entropy(rows in 1usize..5, classes in 2usize..6, beta in 0.0f64..1.0, seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let logits = random(&[rows, classes], &mut rng);
        let mut targets: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
        targets[0] = 1 + rng.below(classes - 1);
        check(|g, v| g.cross_entropy(v[0], &targets, beta), &[logits]);
    }

    #[test]
    fn embedding_rows(vocab in 2usize..6, d in 1usize..4, seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let table = random(&[vocab + 1, d], &mut rng);
        // The padding row is constant by contract, so finite differences
        // only apply to real tokens.
        let tokens: Vec<usize> = (0..6).map(|_| 1 + rng.below(vocab)).collect();
        check(|g, v| { let y = g.embedding(v[0], &tokens, &[2, 3])?; weighted_sum(g, y, seed) }, &[table]);
    }
}

#[test]
fn dropout_gradient_uses_the_same_mask() {
    let x = random(&[20], &mut RngState::new(9));
    check(
        |g, v| {
            // Re-seeded per evaluation so every pass draws the same mask.
            let mut rng = RngState::new(17);
            let y = g.dropout(v[0], 0.4, &mut rng, true)?;
            weighted_sum(g, y, 1)
        },
        &[x],
    );
}

#[test]
fn embedding_gradient_only_touches_looked_up_rows() {
    let mut rng = RngState::new(4);
    let table = random(&[6, 3], &mut rng);
    let tokens = [2usize, 0, 2];
    let mut g = Graph::new();
    let t = g.variable(table.clone());
    let e = g.embedding(t, &tokens, &[1, 3]).unwrap();
    let s = weighted_sum(&mut g, e, 2).unwrap();
    g.backward(s).unwrap();
    let grad = g.grad(t).unwrap();
    for row in 0..6 {
        let nonzero = grad.row(row).iter().any(|&v| v != 0.0);
        assert_eq!(nonzero, row == 2, "row {row}");
    }
    let real = [2usize, 5, 2];
    let report = grad_check(
        |g, v| {
            let y = g.embedding(v[0], &real, &[1, 3])?;
            weighted_sum(g, y, 2)
        },
        &[table],
        H,
        TOL,
    )
    .unwrap();
    assert!(report.passed());
}

#[test]
fn fused_loss_matches_primitive_composition() {
    // Independent route: softmax over real tokens, log, pick, entropy.
    let mut rng = RngState::new(21);
    let logits = random(&[3, 5], &mut rng);
    let targets = [2usize, 4, 1];
    let beta = 0.3;
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let fused = g.cross_entropy(l, &targets, beta).unwrap();
    let fused = g.value(fused).data()[0];

    let mask: Vec<bool> = (0..5).map(|j| j != 0).collect();
    let p = g.softmax(l, Some(&mask)).unwrap();
    let probs = g.value(p).clone();
    let mut total = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        let row = probs.row(r);
        let plogp: f64 = row[1..].iter().map(|&q| q * q.ln()).sum();
        total += -row[y].ln() + beta * plogp;
    }
    assert!((fused - total / 3.0).abs() < 1e-12);
}
