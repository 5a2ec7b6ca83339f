use trajnet::evaluation::{next_step_accuracy, AccuracyMode};
use trajnet::models::{Architecture, ModelConfig, TokenBatch, TrajectoryModel};
use trajnet::synth::MarkovChainSpec;
use trajnet::training::{self, train_step, AdamConfig, AdamState, TrainConfig, TrainLog};
use trajnet::RngState;

fn small(arch: Architecture, vocab: usize, tied: bool) -> TrajectoryModel {
    let mut cfg = ModelConfig::for_architecture(arch, vocab).with_width(16);
    cfg.head_count = 2;
    cfg.tied_output = tied;
    TrajectoryModel::new(cfg, &mut RngState::new(1)).unwrap()
}

fn quick_config(arch: Architecture) -> TrainConfig {
    let mut tc = TrainConfig::for_architecture(arch);
    tc.learning_rate = 0.01;
    tc.batch_size = 16;
    tc.max_epochs = 8;
    tc.record_timing = false;
    tc
}

fn chain_data(n: usize) -> Vec<Vec<usize>> {
    let chain = MarkovChainSpec::dominant_successor(6, 0.8, 9).unwrap();
    chain.generate(n, 12, 12).unwrap().into_iter().map(|s| s.tokens).collect()
}

#[test]
fn small_models_memorize_one_sequence() {
    let seq = [1usize, 4, 2, 6, 3, 5, 1, 2, 2, 6];
    let copies: Vec<&[usize]> = vec![&seq[..]; 8];
    let (batch, targets) = TokenBatch::with_targets(&copies).unwrap();
    for arch in [Architecture::Lstm, Architecture::Transformer] {
        let mut model = small(arch, 6, false);
        let mut adam = AdamState::new(AdamConfig::new(0.02), model.params());
        let mut rng = RngState::new(2);
        for _ in 0..150 {
            train_step(&mut model, &mut adam, &batch, &targets, &mut rng).unwrap();
        }
        let acc = next_step_accuracy(&model, &copies, AccuracyMode::Micro).unwrap();
        assert!(acc > 0.99, "{arch}: {acc}");
    }
}

#[test]
fn training_is_reproducible() {
    let data = chain_data(40);
    let seqs: Vec<&[usize]> = data.iter().map(Vec::as_slice).collect();
    for arch in [Architecture::Lstm, Architecture::Transformer] {
        let run = |seed| {
            let out = training::train(small(arch, 6, true), &seqs[..32], &seqs[32..], &quick_config(arch), &RngState::new(seed), |_| {}).unwrap();
            (out.model.params().tensors().to_vec(), out.log.to_csv())
        };
        let (a, b) = (run(3), run(3));
        assert_eq!(a, b, "{arch}");
        assert_ne!(a.0, run(4).0, "{arch}: seed ignored");
    }
}

#[test]
fn returned_model_has_lowest_validation_loss() {
    let data = chain_data(60);
    let seqs: Vec<&[usize]> = data.iter().map(Vec::as_slice).collect();
    let mut tc = quick_config(Architecture::Transformer);
    tc.learning_rate = 0.05;
    tc.max_epochs = 20;
    let mut seen = Vec::new();
    let out = training::train(small(Architecture::Transformer, 6, false), &seqs[..48], &seqs[48..], &tc, &RngState::new(5), |e| seen.push(e.clone())).unwrap();
    assert_eq!(seen, out.log.epochs);
    let best = training::evaluate_loss(&out.model, &seqs[48..], 16).unwrap().loss;
    assert_eq!(best, out.best_val_loss);
    for e in &out.log.epochs {
        assert!(best <= e.val_loss, "epoch {} had {} < {best}", e.epoch, e.val_loss);
    }
    assert_eq!(out.log.epochs[out.best_epoch - 1].val_loss, best);
}

#[test]
fn tied_output_follows_embedding_through_updates() {
    let data = chain_data(16);
    let seqs: Vec<&[usize]> = data.iter().map(Vec::as_slice).collect();
    let (batch, targets) = TokenBatch::with_targets(&seqs).unwrap();
    let mut model = small(Architecture::Lstm, 6, true);
    let mut adam = AdamState::new(AdamConfig::new(0.05), model.params());
    let mut rng = RngState::new(6);
    for _ in 0..10 {
        train_step(&mut model, &mut adam, &batch, &targets, &mut rng).unwrap();
        let lt = model.embedding_table().transpose().unwrap();
        assert_eq!(model.output_matrix(), lt);
        assert!(model.embedding_table().row(0).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn stronger_penalty_raises_predictive_entropy() {
    let data = chain_data(32);
    let seqs: Vec<&[usize]> = data.iter().map(Vec::as_slice).collect();
    let (batch, targets) = TokenBatch::with_targets(&seqs).unwrap();
    let mut entropies = Vec::new();
    for beta in [0.0, 0.5, 2.0] {
        let mut cfg = small(Architecture::Lstm, 6, false).config().clone();
        cfg.confidence_beta = beta;
        let mut model = TrajectoryModel::new(cfg, &mut RngState::new(1)).unwrap();
        let mut adam = AdamState::new(AdamConfig::new(0.02), model.params());
        let mut rng = RngState::new(7);
        let mut last = None;
        for _ in 0..60 {
            last = Some(train_step(&mut model, &mut adam, &batch, &targets, &mut rng).unwrap().0);
        }
        entropies.push(last.unwrap().entropy);
    }
    assert!(entropies[0] < entropies[1] && entropies[1] < entropies[2], "{entropies:?}");
}

#[test]
fn log_round_trips_through_csv() {
    let data = chain_data(30);
    let seqs: Vec<&[usize]> = data.iter().map(Vec::as_slice).collect();
    let out = training::train(small(Architecture::Lstm, 6, false), &seqs[..24], &seqs[24..], &quick_config(Architecture::Lstm), &RngState::new(8), |_| {}).unwrap();
    let text = out.log.to_csv();
    assert_eq!(TrainLog::from_csv(&text).unwrap().to_csv(), text);
}
