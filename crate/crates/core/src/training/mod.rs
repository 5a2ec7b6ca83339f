//! Penalized next-step loss, Adam, and the epoch loop with early stopping.

mod adam;
mod early_stop;
mod split;

use std::time::Instant;

pub use adam::{AdamConfig, AdamState};
pub use early_stop::{EarlyStopState, StopDecision, DEFAULT_PATIENCE};
pub use split::{Split, SplitSpec};

use crate::error::{Error, Result};
use crate::evaluation::{argmax_token, AccuracyCounts};
use crate::graph::{Graph, LossParts, Var};
use crate::models::{Architecture, TokenBatch, TrajectoryModel};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Loss settings. Padding targets are always excluded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub confidence_beta: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.confidence_beta.is_finite() && self.confidence_beta >= 0.0 {
            Ok(())
        } else {
            Err(Error::config(format!("confidence penalty weight {} must be finite and >= 0", self.confidence_beta)))
        }
    }
}

/// Mean over non-padding targets of `−ln p_true + β·Σ p ln p`; the
/// components are available afterwards through [`Graph::loss_parts`].
pub fn sequence_loss(g: &mut Graph, logits: Var, targets: &[usize], cfg: LossConfig) -> Result<Var> {
    cfg.validate()?;
    g.cross_entropy(logits, targets, cfg.confidence_beta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub max_grad_norm: Option<f64>,
    /// When false, per-batch times are logged as 0 so logs are reproducible
    /// byte for byte.
    pub record_timing: bool,
}

pub const DEFAULT_MAX_EPOCHS: usize = 100;

impl TrainConfig {
    pub fn for_architecture(arch: Architecture) -> Self {
        let (learning_rate, batch_size) = match arch {
            Architecture::Lstm => (0.01, 128),
            Architecture::Transformer => (0.0005, 64),
        };
        TrainConfig {
            learning_rate,
            batch_size,
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            max_grad_norm: None,
            record_timing: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub mean_batch_ms: f64,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Wall time of every training batch in milliseconds.
    pub batch_ms: Vec<f64>,
}

pub const TRAIN_LOG_COLUMNS: &str = "epoch,train_loss,train_acc,val_loss,val_acc,mean_batch_ms,stopped_early";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_COLUMNS}\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc, e.mean_batch_ms, e.stopped_early
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(TRAIN_LOG_COLUMNS) {
            return Err(Error::config("train log has an unexpected header"));
        }
        let mut epochs = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = || Error::config(format!("train log row {} is malformed", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
            epochs.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                train_acc: num(2)?,
                val_loss: num(3)?,
                val_acc: num(4)?,
                mean_batch_ms: num(5)?,
                stopped_early: f[6].parse().map_err(|_| bad())?,
            });
        }
        Ok(TrainLog {
            epochs,
            batch_ms: Vec::new(),
        })
    }
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: TrajectoryModel,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Loss and accuracy of one inference pass over `seqs`.
#[derive(Clone, Debug, Default)]
pub struct PassStats {
    pub loss: f64,
    pub accuracy: AccuracyCounts,
}

fn record_accuracy(acc: &mut AccuracyCounts, logits: &Tensor, targets: &[usize], len: usize) {
    let preds: Vec<usize> = logits.data().chunks(logits.last_dim()).map(argmax_token).collect();
    acc.record(&preds, targets, len);
}

/// Target-weighted mean loss over every batch of `seqs` in inference mode.
pub fn evaluate_loss(model: &TrajectoryModel, seqs: &[&[usize]], batch_size: usize) -> Result<PassStats> {
    let cfg = LossConfig {
        confidence_beta: model.config().confidence_beta,
    };
    let mut stats = PassStats::default();
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in seqs.chunks(batch_size.max(1)) {
        let (batch, targets) = TokenBatch::with_targets(chunk)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, None)?;
        match sequence_loss(&mut g, out.logits, &targets, cfg) {
            Ok(loss) => {
                let parts = g.loss_parts(loss).expect("loss node");
                sum += parts.total() * parts.count as f64;
                count += parts.count;
            }
            Err(Error::EmptyTargets) => {}
            Err(e) => return Err(e),
        }
        record_accuracy(&mut stats.accuracy, g.value(out.logits), &targets, batch.len);
    }
    if count == 0 {
        return Err(Error::EmptyTargets);
    }
    stats.loss = sum / count as f64;
    Ok(stats)
}

/// One optimizer step on a batch; returns the loss components and logits.
pub fn train_step(
    model: &mut TrajectoryModel,
    adam: &mut AdamState,
    batch: &TokenBatch,
    targets: &[usize],
    dropout: &mut RngState,
) -> Result<(LossParts, Tensor)> {
    let cfg = LossConfig {
        confidence_beta: model.config().confidence_beta,
    };
    let mut g = Graph::new();
    let out = model.forward(&mut g, batch, Some(dropout))?;
    let loss = sequence_loss(&mut g, out.logits, targets, cfg)?;
    g.backward(loss)?;
    let parts = g.loss_parts(loss).expect("loss node");
    let grads: Vec<Option<Tensor>> = (0..model.params().len())
        .map(|id| g.param_var(id).and_then(|v| g.grad(v)))
        .collect();
    let logits = g.take_value(out.logits);
    adam.step(model.params_mut(), &grads)?;
    Ok((parts, logits))
}

/// Trains until validation loss stalls for `patience` epochs or the epoch
/// cap is reached, then restores the best-validation parameters.
///
/// Randomness comes from streams derived from `rng`: `shuffle` and
/// `dropout`, each further keyed by epoch.
pub fn train(
    mut model: TrajectoryModel,
    train_seqs: &[&[usize]],
    val_seqs: &[&[usize]],
    cfg: &TrainConfig,
    rng: &RngState,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_seqs.is_empty() || val_seqs.is_empty() {
        return Err(Error::config("training and validation sets must be nonempty"));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::config("batch size, epoch cap and learning rate must be positive"));
    }
    let mut adam_cfg = AdamConfig::new(cfg.learning_rate);
    adam_cfg.max_grad_norm = cfg.max_grad_norm;
    let mut adam = AdamState::new(adam_cfg, model.params());
    let mut stopper = EarlyStopState::new(cfg.patience);
    let mut best = model.params().clone();
    let mut log = TrainLog::default();
    let shuffle_root = rng.derive_str("shuffle");
    let dropout_root = rng.derive_str("dropout");
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        shuffle_root.derive(epoch as u64).shuffle(&mut order);
        let mut dropout = dropout_root.derive(epoch as u64);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        let mut acc = AccuracyCounts::default();
        let mut times = Vec::new();
        for idx in order.chunks(cfg.batch_size) {
            let chunk: Vec<&[usize]> = idx.iter().map(|&i| train_seqs[i]).collect();
            let (batch, targets) = TokenBatch::with_targets(&chunk)?;
            if targets.iter().all(|&t| t == 0) {
                continue;
            }
            let start = Instant::now();
            let (parts, logits) = train_step(&mut model, &mut adam, &batch, &targets, &mut dropout)?;
            times.push(if cfg.record_timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 });
            loss_sum += parts.total() * parts.count as f64;
            count += parts.count;
            record_accuracy(&mut acc, &logits, &targets, batch.len);
        }
        if count == 0 {
            return Err(Error::EmptyTargets);
        }
        let val = evaluate_loss(&model, val_seqs, cfg.batch_size)?;
        let decision = stopper.observe(val.loss);
        if decision == StopDecision::Improved {
            best = model.params().clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            train_acc: acc.micro(),
            val_loss: val.loss,
            val_acc: val.accuracy.micro(),
            mean_batch_ms: times.iter().sum::<f64>() / times.len() as f64,
            stopped_early: decision == StopDecision::Stop,
        };
        on_epoch(&record);
        log.epochs.push(record);
        log.batch_ms.extend(times);
        if decision == StopDecision::Stop {
            break;
        }
    }
    *model.params_mut() = best;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        // Certain and correct: p_true = 1 up to exp(-800) underflow.
        let sure = g.constant(Tensor::new(&[1, 3], vec![0.0, 800.0, 0.0]).unwrap());
        let l = sequence_loss(&mut g, sure, &[1], LossConfig { confidence_beta: 0.0 }).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let uniform = g.constant(Tensor::new(&[1, 5], vec![3.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let l = sequence_loss(&mut g, uniform, &[2], LossConfig { confidence_beta: 0.0 }).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        let bad = LossConfig { confidence_beta: -0.1 };
        assert!(sequence_loss(&mut g, uniform, &[2], bad).is_err());
    }

    #[test]
    fn padding_never_changes_the_loss() {
        let cfg = {
            let mut c = ModelConfig::transformer(6).with_width(4);
            c.head_count = 2;
            c
        };
        let model = TrajectoryModel::new(cfg, &mut RngState::new(5)).unwrap();
        let a = [1usize, 3, 4, 2];
        let b = [1usize, 6, 5, 0];
        let short = evaluate_loss(&model, &[&a, &b], 8).unwrap().loss;
        // Padded columns are trimmed off, so build the padded batch directly.
        let pa = [1usize, 3, 4, 2, 0, 0, 0];
        let pb = [1usize, 6, 5, 0, 0, 0, 0];
        let mut g = Graph::new();
        let batch = TokenBatch::new(2, 7, pa.iter().chain(&pb).copied().collect()).unwrap();
        let targets: Vec<usize> = [&pa[..], &pb[..]]
            .iter()
            .flat_map(|s| (1..=7).map(move |i| s.get(i).copied().unwrap_or(0)))
            .collect();
        let out = model.forward(&mut g, &batch, None).unwrap();
        let l = sequence_loss(&mut g, out.logits, &targets, LossConfig { confidence_beta: 0.1 }).unwrap();
        assert!((g.value(l).data()[0] - short).abs() < 1e-12);
    }

    #[test]
    fn log_csv_round_trip() {
        let log = TrainLog {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 1.5,
                train_acc: 0.25,
                val_loss: 1.25,
                val_acc: 0.5,
                mean_batch_ms: 3.0,
                stopped_early: true,
            }],
            batch_ms: vec![],
        };
        let csv = log.to_csv();
        assert_eq!(
            csv,
            "epoch,train_loss,train_acc,val_loss,val_acc,mean_batch_ms,stopped_early\n1,1.500000,0.250000,1.250000,0.500000,3.000000,true\n"
        );
        assert_eq!(TrainLog::from_csv(&csv).unwrap(), log);
    }

    #[test]
    fn table2_training_defaults() {
        let l = TrainConfig::for_architecture(Architecture::Lstm);
        assert_eq!((l.learning_rate, l.batch_size), (0.01, 128));
        let t = TrainConfig::for_architecture(Architecture::Transformer);
        assert_eq!((t.learning_rate, t.batch_size), (0.0005, 64));
        assert_eq!((t.max_epochs, t.patience, t.max_grad_norm), (100, 3, None));
    }
}
