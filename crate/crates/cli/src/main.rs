use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use trajnet::evaluation::{self, MetricsRow};
use trajnet::ingest::{self, ColumnMap, InputFormat, SequenceSet, Vocab};
use trajnet::models::{self, Architecture, ModelConfig, TrajectoryModel};
use trajnet::synth::MarkovChainSpec;
use trajnet::training::{self, SplitSpec, TrainConfig};
use trajnet::{Error, RngState};

#[derive(Parser)]
#[command(name = "trajnet", version, about = "Next-step prediction over course navigation trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a raw navigation log into a vocabulary and padded sequences.
    Ingest(IngestArgs),
    /// Sample a sequence file from a Markov chain spec.
    Synth(SynthArgs),
    /// Train an LSTM or Transformer and write a checkpoint.
    Train(TrainArgs),
    /// Score checkpoints and write a metrics report.
    Eval(EvalArgs),
    /// Print a checkpoint's configuration and parameters.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Raw log file.
    #[arg(long)]
    input: PathBuf,
    /// csv or jsonl.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Column mapping, e.g. `username=user,path=chapter+sequential`.
    #[arg(long, default_value = "")]
    columns: String,
    /// Node name of the course homepage.
    #[arg(long)]
    homepage: String,
    #[arg(long, default_value_t = ingest::DEFAULT_MAX_SEQ_LEN)]
    max_len: usize,
    #[arg(long)]
    out_vocab: PathBuf,
    #[arg(long)]
    out_seqs: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON `{states, init, transitions, seed}`.
    #[arg(long)]
    spec: PathBuf,
    /// Number of sequences.
    #[arg(long)]
    n: usize,
    /// Tokens per sequence.
    #[arg(long)]
    len: usize,
    /// Padded width of the output file [default: --len].
    #[arg(long)]
    max_len: Option<usize>,
    /// Replaces the seed stored in the spec.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the `s1..sN` vocabulary.
    #[arg(long)]
    out_vocab: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "lstm")]
    arch: String,
    #[arg(long)]
    seqs: PathBuf,
    /// Vocabulary file; without it |T| is the largest token in --seqs.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// JSON file with any of the hyperparameter flags below (snake_case);
    /// explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    out_log: Option<PathBuf>,
    #[command(flatten)]
    hp: Hyper,
    /// Log per-batch times as 0 so repeated runs give identical logs.
    #[arg(long)]
    no_timing: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Hyper {
    /// Adam learning rate [default: 0.01 lstm, 0.0005 transformer].
    #[arg(long)]
    lr: Option<f64>,
    /// Sequences per batch [default: 128 lstm, 64 transformer].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Main layer width [default: 128].
    #[arg(long)]
    d_model: Option<usize>,
    /// LSTM layers or Transformer blocks [default: 2].
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads [default: 8].
    #[arg(long)]
    heads: Option<usize>,
    /// Transformer FFN width [default: 4·d_model = 512].
    #[arg(long)]
    ffn_hidden: Option<usize>,
    /// Confidence penalty weight β; 0 disables it [default: 0.1].
    #[arg(long)]
    beta: Option<f64>,
    /// Tie the output matrix to the embedding table.
    #[arg(long)]
    #[serde(default)]
    tied: bool,
    /// Residual/embedding dropout [default: 0 lstm, 0.1 transformer].
    #[arg(long)]
    dropout: Option<f64>,
    /// Recurrent dropout, one mask per sequence [default: 0.2 lstm].
    #[arg(long)]
    recurrent_dropout: Option<f64>,
    /// Epoch cap on top of early stopping [default: 100].
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 3].
    #[arg(long)]
    patience: Option<usize>,
    /// Clip the joint gradient norm [default: off].
    #[arg(long)]
    max_grad_norm: Option<f64>,
}

impl Hyper {
    /// Fills unset fields from `base`.
    fn or(self, base: Hyper) -> Hyper {
        Hyper {
            lr: self.lr.or(base.lr),
            batch_size: self.batch_size.or(base.batch_size),
            d_model: self.d_model.or(base.d_model),
            layers: self.layers.or(base.layers),
            heads: self.heads.or(base.heads),
            ffn_hidden: self.ffn_hidden.or(base.ffn_hidden),
            beta: self.beta.or(base.beta),
            tied: self.tied || base.tied,
            dropout: self.dropout.or(base.dropout),
            recurrent_dropout: self.recurrent_dropout.or(base.recurrent_dropout),
            max_epochs: self.max_epochs.or(base.max_epochs),
            patience: self.patience.or(base.patience),
            max_grad_norm: self.max_grad_norm.or(base.max_grad_norm),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score; repeat together with --seqs for several runs.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Sequence file for the checkpoint at the same position.
    #[arg(long, required = true)]
    seqs: Vec<PathBuf>,
    /// Training log per run, for the timing columns.
    #[arg(long)]
    log: Vec<PathBuf>,
    /// Dataset name per run [default: sequence file stem].
    #[arg(long)]
    dataset: Vec<String>,
    /// Seed used at training time, to rebuild the train/test split.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Score the held-out `test` split or `all` sequences.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long)]
    out_report: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Parse { .. } | Error::Checkpoint(_) => 3,
        Error::NonFinite { .. } | Error::Domain { .. } | Error::DegenerateMask { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => run_ingest(a),
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Inspect(a) => run_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn run_ingest(a: IngestArgs) -> trajnet::Result<()> {
    let format: InputFormat = a.format.parse()?;
    let columns: ColumnMap = a.columns.parse()?;
    let source = File::open(&a.input).map_err(|e| with_path(e.into(), &a.input))?;
    let (vocab, seqs, summary) = ingest::run_pipeline(BufReader::new(source), format, &columns, &a.homepage, a.max_len)?;
    vocab.write(&a.out_vocab).map_err(|e| with_path(e, &a.out_vocab))?;
    ingest::write_sequences_file(&a.out_seqs, a.max_len, &seqs).map_err(|e| with_path(e, &a.out_seqs))?;
    println!("records:    {}", summary.total);
    println!("malformed:  {}", summary.malformed);
    println!("navigation: {}", summary.navigation);
    println!("filtered:   {}", summary.total - summary.malformed - summary.navigation);
    println!("vocab |T|:  {}", summary.vocab_size);
    println!("sequences:  {}", summary.sequences);
    Ok(())
}

fn run_synth(a: SynthArgs) -> trajnet::Result<()> {
    let mut spec = MarkovChainSpec::read(&a.spec).map_err(|e| with_path(e, &a.spec))?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let max_len = a.max_len.unwrap_or(a.len);
    let seqs = spec.generate(a.n, a.len, max_len)?;
    ingest::write_sequences_file(&a.out, max_len, &seqs).map_err(|e| with_path(e, &a.out))?;
    if let Some(p) = &a.out_vocab {
        spec.vocab().write(p).map_err(|e| with_path(e, p))?;
    }
    println!("sequences:    {}", seqs.len());
    println!("states:       {}", spec.states);
    match (spec.entropy_rate(), spec.oracle_accuracy()) {
        (Ok(h), Ok(acc)) => {
            println!("entropy rate: {h:.6} nats/step");
            println!("oracle acc:   {acc:.6}");
        }
        (Err(e), _) | (_, Err(e)) => println!("oracle:       unavailable ({e})"),
    }
    Ok(())
}

fn read_seqs(path: &Path) -> trajnet::Result<SequenceSet> {
    ingest::read_sequences_file(path).map_err(|e| with_path(e, path))
}

fn run_train(a: TrainArgs) -> trajnet::Result<()> {
    let arch: Architecture = a.arch.parse()?;
    let file_hp = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| with_path(e.into(), p))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Hyper::default(),
    };
    let hp = a.hp.or(file_hp);
    let data = read_seqs(&a.seqs)?;
    let max_token = data.max_token();
    let vocab_size = match &a.vocab {
        Some(p) => {
            let v = Vocab::read(p).map_err(|e| with_path(e, p))?;
            if max_token > v.len() {
                return Err(Error::Config(format!(
                    "sequence file uses token {max_token} but the vocabulary has {} tokens",
                    v.len()
                )));
            }
            v.len()
        }
        None => max_token,
    };
    if vocab_size == 0 {
        return Err(Error::Config("sequence file contains no tokens".into()));
    }

    let mut mc = ModelConfig::for_architecture(arch, vocab_size);
    mc.max_seq_len = data.max_seq_len;
    if let Some(d) = hp.d_model {
        mc = mc.with_width(d);
    }
    mc.layer_count = hp.layers.unwrap_or(mc.layer_count);
    if arch == Architecture::Transformer {
        mc.head_count = hp.heads.unwrap_or(mc.head_count);
        mc.ffn_hidden = hp.ffn_hidden.unwrap_or(mc.ffn_hidden);
    }
    mc.confidence_beta = hp.beta.unwrap_or(mc.confidence_beta);
    mc.tied_output = hp.tied;
    mc.dropout_rate = hp.dropout.unwrap_or(mc.dropout_rate);
    mc.recurrent_dropout_rate = hp.recurrent_dropout.unwrap_or(mc.recurrent_dropout_rate);

    let mut tc = TrainConfig::for_architecture(arch);
    tc.learning_rate = hp.lr.unwrap_or(tc.learning_rate);
    tc.batch_size = hp.batch_size.unwrap_or(tc.batch_size);
    tc.max_epochs = hp.max_epochs.unwrap_or(tc.max_epochs);
    tc.patience = hp.patience.unwrap_or(tc.patience);
    tc.max_grad_norm = hp.max_grad_norm;
    tc.record_timing = !a.no_timing;

    let root = RngState::new(a.seed);
    let model = TrajectoryModel::new(mc, &mut root.derive_str("init"))?;
    let split = SplitSpec::default().assign(data.sequences.len(), &mut root.derive_str("split"))?;
    let pick = |idx: &[usize]| -> Vec<&[usize]> { idx.iter().map(|&i| data.sequences[i].tokens.as_slice()).collect() };
    let (train_set, val_set) = (pick(&split.train), pick(&split.validation));
    if !a.quiet {
        eprintln!(
            "{}: {} trainable parameters, lr {}, batch {}, {} train / {} validation sequences",
            model.config().label(),
            model.trainable_parameter_count(),
            tc.learning_rate,
            tc.batch_size,
            train_set.len(),
            val_set.len()
        );
    }
    let quiet = a.quiet;
    let outcome = training::train(model, &train_set, &val_set, &tc, &root.derive_str("train"), |e| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}  {:.1} ms/batch",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc, e.mean_batch_ms
            );
        }
    })?;
    models::save_checkpoint(&outcome.model, &a.out_checkpoint).map_err(|e| with_path(e, &a.out_checkpoint))?;
    if let Some(p) = &a.out_log {
        fs::write(p, outcome.log.to_csv()).map_err(|e| with_path(e.into(), p))?;
    }
    println!("best epoch:    {}", outcome.best_epoch);
    println!("best val loss: {:.6}", outcome.best_val_loss);
    println!("epochs run:    {}", outcome.log.epochs.len());
    Ok(())
}

fn run_eval(a: EvalArgs) -> trajnet::Result<()> {
    if a.checkpoint.len() != a.seqs.len() {
        return Err(Error::Config(format!(
            "{} checkpoints but {} sequence files",
            a.checkpoint.len(),
            a.seqs.len()
        )));
    }
    if !a.log.is_empty() && a.log.len() != a.checkpoint.len() {
        return Err(Error::Config("give one --log per run or none".into()));
    }
    if !a.dataset.is_empty() && a.dataset.len() != a.checkpoint.len() {
        return Err(Error::Config("give one --dataset per run or none".into()));
    }
    let held_out = match a.split.as_str() {
        "test" => true,
        "all" => false,
        other => return Err(Error::Config(format!("unknown split `{other}` (expected test or all)"))),
    };
    let mut rows = Vec::new();
    let mut baselines = Vec::new();
    for (i, (ckpt, seqs_path)) in a.checkpoint.iter().zip(&a.seqs).enumerate() {
        let model = models::load_checkpoint(ckpt).map_err(|e| with_path(e, ckpt))?;
        let data = read_seqs(seqs_path)?;
        let vocab = model.config().vocab_size;
        if data.max_token() > vocab {
            return Err(Error::Config(format!(
                "{} uses token {} but checkpoint {} has vocabulary size {vocab}",
                seqs_path.display(),
                data.max_token(),
                ckpt.display()
            )));
        }
        let all: Vec<usize> = (0..data.sequences.len()).collect();
        let (train_idx, test_idx) = if held_out {
            let s = SplitSpec::default().assign(data.sequences.len(), &mut RngState::new(a.seed).derive_str("split"))?;
            (s.train, s.test)
        } else {
            (all.clone(), all)
        };
        let pick = |idx: &[usize]| -> Vec<&[usize]> { idx.iter().map(|&i| data.sequences[i].tokens.as_slice()).collect() };
        let (train_set, test_set) = (pick(&train_idx), pick(&test_idx));
        if test_set.is_empty() {
            return Err(Error::Config(format!("{} has no held-out test sequences", seqs_path.display())));
        }
        let test = evaluation::score(&model, &test_set, a.batch_size)?;
        let train = evaluation::score(&model, &train_set, a.batch_size)?;
        let (mean_ms, std_ms) = match a.log.get(i) {
            Some(p) => {
                let log = training::TrainLog::from_csv(&fs::read_to_string(p).map_err(|e| with_path(e.into(), p))?)?;
                let per_epoch: Vec<f64> = log.epochs.iter().map(|e| e.mean_batch_ms).collect();
                evaluation::mean_std(&per_epoch)
            }
            None => (0.0, 0.0),
        };
        let dataset = a.dataset.get(i).cloned().unwrap_or_else(|| {
            seqs_path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
        });
        baselines.push((dataset.clone(), evaluation::unigram_baseline(&test_set)?));
        rows.push(MetricsRow {
            dataset,
            model: model.config().label(),
            test_acc_micro: test.micro(),
            test_acc_macro: test.macro_avg(),
            train_acc_micro: train.micro(),
            mean_batch_ms: mean_ms,
            std_batch_ms: std_ms,
        });
    }
    let report = evaluation::summarize(rows)?;
    fs::write(&a.out_report, report.to_csv()).map_err(|e| with_path(e.into(), &a.out_report))?;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(report.render_table().as_bytes());
    for (name, acc) in baselines {
        let _ = writeln!(out, "unigram baseline on {name}: {acc:.4}");
    }
    Ok(())
}

fn run_inspect(a: InspectArgs) -> trajnet::Result<()> {
    let model = models::load_checkpoint(&a.checkpoint).map_err(|e| with_path(e, &a.checkpoint))?;
    let cfg = model.config();
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "config:");
    let json = serde_json::to_string_pretty(cfg).expect("serializable");
    for line in json.lines() {
        let _ = writeln!(out, "  {line}");
    }
    let _ = writeln!(out, "parameters:");
    let width = model.params().iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    for (name, t) in model.params().iter() {
        let _ = writeln!(out, "  {name:<width$}  {:<12}  {}", format!("{:?}", t.shape()), t.len());
    }
    let _ = writeln!(out, "total stored:    {}", model.parameter_count());
    let _ = writeln!(out, "trainable:       {}", model.trainable_parameter_count());
    if model.is_tied() {
        let _ = writeln!(out, "output matrix:   tied to embedding (no separate tensor)");
        let mut untied = cfg.clone();
        untied.tied_output = false;
        let twin = TrajectoryModel::new(untied, &mut RngState::new(0))?;
        let diff = twin.trainable_parameter_count() as i64 - model.trainable_parameter_count() as i64;
        let _ = writeln!(out, "untied trainable: {} (difference {diff})", twin.trainable_parameter_count());
    } else {
        let _ = writeln!(out, "output matrix:   head.weight (untied)");
        if cfg.d_embed == cfg.d_model {
            let mut tied = cfg.clone();
            tied.tied_output = true;
            let twin = TrajectoryModel::new(tied, &mut RngState::new(0))?;
            let diff = model.trainable_parameter_count() as i64 - twin.trainable_parameter_count() as i64;
            let _ = writeln!(out, "tied trainable:  {} (difference {diff})", twin.trainable_parameter_count());
        }
    }
    Ok(())
}
