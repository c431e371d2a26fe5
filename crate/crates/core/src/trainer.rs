//! Fine-tuning loop: shuffled mini-batches, combined loss, Adam on the
//! unfrozen parameters, JSON-Lines metrics and periodic checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Episode;
use crate::model::{Adam, AdamConfig, Model, ModelError, Params};
use crate::objective::{loss_grad_rows, LossBreakdown, LossSums, MetricSet, MetricSums, ObjectiveError};
use crate::tokenizer::{assemble_sample, TokenizedSample, TokenizerError, Vocabulary, DEFAULT_REASONING_BUDGET, IGNORE};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("episode {episode_id} step {step} has no reasoning trace and lambda_r > 0")]
    MissingTrace { episode_id: String, step: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("model vocabulary has {model} ids, tokenizer has {vocab}")]
    VocabMismatch { model: usize, vocab: usize },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_r: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub freeze_layers: usize,
    pub seed: u64,
    /// Checkpoint period in optimizer steps; a final checkpoint is always written.
    pub save_steps: usize,
    pub reasoning_budget: usize,
    /// Held-out evaluation period in steps, 0 for start and end only.
    pub eval_every: usize,
    /// Stop after this many evals without a new best action accuracy.
    pub early_stop_patience: Option<usize>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_r: crate::objective::DEFAULT_LAMBDA_R,
            learning_rate: 2e-4,
            batch_size: 32,
            epochs: 1,
            freeze_layers: 0,
            seed: 0,
            save_steps: 500,
            reasoning_budget: DEFAULT_REASONING_BUDGET,
            eval_every: 0,
            early_stop_patience: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_layers: usize) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lambda_r.is_finite() && self.lambda_r >= 0.0) {
            return bad("lambda_r must be finite and >= 0");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.save_steps == 0 {
            return bad("batch_size, epochs and save_steps must be positive");
        }
        if self.freeze_layers > n_layers {
            return Err(TrainError::Config(format!(
                "freeze_layers {} exceeds model depth {n_layers}",
                self.freeze_layers
            )));
        }
        if self.early_stop_patience == Some(0) {
            return bad("early_stop_patience must be positive");
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`, computed on the batch before its update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_action: f64,
    pub loss_reasoning: f64,
    pub action_accuracy: Option<f64>,
    pub reasoning_accuracy: Option<f64>,
    pub action_l1: Option<f64>,
    pub n_action_tokens: usize,
    pub n_reasoning_tokens: usize,
}

/// One line of `eval.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_action: f64,
    pub loss_reasoning: f64,
    pub action_accuracy: Option<f64>,
    pub reasoning_accuracy: Option<f64>,
    pub action_l1: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl EvalRecord {
    fn new(step: u64, l: &LossBreakdown, m: &MetricSet) -> Self {
        EvalRecord {
            step,
            loss_total: l.loss_total,
            loss_action: l.loss_action,
            loss_reasoning: l.loss_reasoning,
            action_accuracy: finite(m.action_accuracy),
            reasoning_accuracy: finite(m.reasoning_accuracy),
            action_l1: finite(m.action_l1),
        }
    }
}

/// Mutable loop state. Optimizer moments exist only for trainable tensors.
pub struct TrainState<T: Scalar> {
    pub step: u64,
    pub optimizer: Adam<T>,
    pub rng: ChaCha8Rng,
    pub best_action_accuracy: Option<f64>,
    pub evals_since_best: usize,
}

pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub steps: u64,
    pub metrics_path: PathBuf,
    pub eval_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub evals: Vec<EvalRecord>,
    pub stopped_early: bool,
}

/// Tokenizes every step. With `require_traces`, a step without a trace is an error.
pub fn tokenize_dataset(
    episodes: &[Episode],
    v: &Vocabulary,
    reasoning_budget: usize,
    require_traces: bool,
) -> Result<Vec<TokenizedSample>, TrainError> {
    let mut out = Vec::new();
    for ep in episodes {
        for (i, step) in ep.steps.iter().enumerate() {
            if require_traces && step.trace.is_none() {
                return Err(TrainError::MissingTrace {
                    episode_id: ep.episode_id.clone(),
                    step: i,
                });
            }
            out.push(assemble_sample(step, v, reasoning_budget)?);
        }
    }
    Ok(out)
}

/// Logit rows (`p - 1`) and their targets (`labels[p]`) for every supervised position.
pub fn supervised_rows(sample: &TokenizedSample) -> (Vec<usize>, Vec<i32>) {
    sample
        .labels
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &l)| l != IGNORE)
        .map(|(p, &l)| (p - 1, l))
        .unzip()
}

fn label_counts(samples: &[&TokenizedSample], v: &Vocabulary) -> LossSums {
    let mut s = LossSums::default();
    for sample in samples {
        for &l in shift(&sample.labels) {
            if l == IGNORE {
                continue;
            }
            if v.is_action(l as u32) {
                s.n_action += 1;
            } else {
                s.n_reasoning += 1;
            }
        }
    }
    s
}

fn shift(labels: &[i32]) -> &[i32] {
    crate::objective::shift_labels(labels)
}

fn check_vocab<T: Scalar>(model: &Model<T>, v: &Vocabulary) -> Result<(), TrainError> {
    if model.cfg.vocab_size != v.size() {
        return Err(TrainError::VocabMismatch {
            model: model.cfg.vocab_size,
            vocab: v.size(),
        });
    }
    Ok(())
}

/// Teacher-forced loss and metrics over pre-tokenized samples.
pub fn evaluate_samples<T: Scalar>(
    model: &Model<T>,
    v: &Vocabulary,
    samples: &[TokenizedSample],
    lambda_r: f64,
) -> Result<(LossBreakdown, MetricSet), TrainError> {
    check_vocab(model, v)?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut loss = LossSums::default();
    let mut metrics = MetricSums::default();
    for s in samples {
        let (rows, targets) = supervised_rows(s);
        let logits = model.forward_rows(s, &rows)?;
        loss.add_rows(logits.view(), &targets, v);
        metrics.add_rows(logits.view(), &targets, v);
    }
    Ok((loss.finish(lambda_r), metrics.finish()))
}

/// Teacher-forced metrics averaged over every step of `episodes`.
pub fn evaluate_offline<T: Scalar>(
    model: &Model<T>,
    v: &Vocabulary,
    episodes: &[Episode],
    reasoning_budget: usize,
) -> Result<MetricSet, TrainError> {
    check_vocab(model, v)?;
    let samples = tokenize_dataset(episodes, v, reasoning_budget, false)?;
    Ok(evaluate_samples(model, v, &samples, 0.0)?.1)
}

/// Gradient of the batch loss, accumulated one sample at a time. Returns the
/// loss and metrics of the batch at the current parameters.
pub fn batch_gradient<T: Scalar>(
    model: &Model<T>,
    v: &Vocabulary,
    batch: &[&TokenizedSample],
    lambda_r: f64,
    grads: &mut Params<T>,
) -> Result<(LossBreakdown, MetricSet), TrainError> {
    let counts = label_counts(batch, v);
    let mut loss = LossSums::default();
    let mut metrics = MetricSums::default();
    for s in batch {
        let (rows, targets) = supervised_rows(s);
        if rows.is_empty() {
            continue;
        }
        let (logits, cache) = model.forward_train(s, &rows)?;
        loss.add_rows(logits.view(), &targets, v);
        metrics.add_rows(logits.view(), &targets, v);
        let dlogits = loss_grad_rows(logits.view(), &targets, v, lambda_r, &counts);
        model.backward(&cache, &dlogits, grads);
    }
    debug_assert_eq!((loss.n_action, loss.n_reasoning), (counts.n_action, counts.n_reasoning));
    Ok((loss.finish(lambda_r), metrics.finish()))
}

fn write_line<W: Write, S: Serialize>(w: &mut W, path: &Path, value: &S) -> Result<(), TrainError> {
    let line = serde_json::to_string(value).expect("metrics serialize");
    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(io_err(path))
}

fn frozen_checksums<T: Scalar>(model: &Model<T>) -> Vec<(String, String)> {
    model
        .tensor_checksums()
        .into_iter()
        .filter(|(n, _)| !model.is_trainable(n))
        .collect()
}

/// Runs `cfg.epochs` passes over `train_set`, evaluating on `eval_set` (if
/// non-empty) at step 0, every `cfg.eval_every` steps and at the end.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    v: &Vocabulary,
    train_set: &[Episode],
    eval_set: &[Episode],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate(model.cfg.n_layers)?;
    check_vocab(&model, v)?;
    model.freeze_lower_layers(cfg.freeze_layers)?;
    let samples = tokenize_dataset(train_set, v, cfg.reasoning_budget, cfg.lambda_r > 0.0)?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let eval_samples = tokenize_dataset(eval_set, v, cfg.reasoning_budget, false)?;

    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let eval_path = cfg.out_dir.join("eval.jsonl");
    let mut metrics_w = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    let mut eval_w = BufWriter::new(File::create(&eval_path).map_err(io_err(&eval_path))?);

    let frozen_before = frozen_checksums(&model);
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = TrainState {
        step: 0,
        optimizer: Adam::new(&model, adam),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        best_action_accuracy: None,
        evals_since_best: 0,
    };
    let mut evals = Vec::new();
    let mut checkpoints = Vec::new();
    let mut stopped_early = false;

    let mut run_eval = |model: &Model<T>, state: &mut TrainState<T>, evals: &mut Vec<EvalRecord>| {
        if eval_samples.is_empty() {
            return Ok::<bool, TrainError>(false);
        }
        let (l, m) = evaluate_samples(model, v, &eval_samples, cfg.lambda_r)?;
        let rec = EvalRecord::new(state.step, &l, &m);
        write_line(&mut eval_w, &eval_path, &rec)?;
        evals.push(rec);
        let acc = finite(m.action_accuracy).unwrap_or(0.0);
        if state.best_action_accuracy.is_none_or(|b| acc > b) {
            state.best_action_accuracy = Some(acc);
            state.evals_since_best = 0;
        } else {
            state.evals_since_best += 1;
        }
        Ok(cfg.early_stop_patience.is_some_and(|p| state.evals_since_best >= p))
    };

    run_eval(&model, &mut state, &mut evals)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut last_eval_step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenizedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut grads = model.zero_grads();
            let (lb, m) = batch_gradient(&model, v, &batch, cfg.lambda_r, &mut grads)?;
            assert_eq!(
                lb.loss_total,
                lb.loss_action + lb.lambda_r * lb.loss_reasoning,
                "loss decomposition"
            );
            state.optimizer.step(&mut model, &grads);
            state.step += 1;
            let line = StepMetrics {
                step: state.step,
                epoch,
                loss_total: lb.loss_total,
                loss_action: lb.loss_action,
                loss_reasoning: lb.loss_reasoning,
                action_accuracy: finite(m.action_accuracy),
                reasoning_accuracy: finite(m.reasoning_accuracy),
                action_l1: finite(m.action_l1),
                n_action_tokens: lb.n_action_tokens,
                n_reasoning_tokens: lb.n_reasoning_tokens,
            };
            write_line(&mut metrics_w, &metrics_path, &line)?;
            if state.step % cfg.save_steps as u64 == 0 {
                checkpoints.push(save_checkpoint(&model, v, &cfg.out_dir, state.step)?);
            }
            if cfg.eval_every > 0 && state.step % cfg.eval_every as u64 == 0 {
                last_eval_step = state.step;
                if run_eval(&model, &mut state, &mut evals)? {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }
    if last_eval_step != state.step {
        run_eval(&model, &mut state, &mut evals)?;
    }
    if state.step % cfg.save_steps as u64 != 0 {
        checkpoints.push(save_checkpoint(&model, v, &cfg.out_dir, state.step)?);
    }
    assert_eq!(frozen_before, frozen_checksums(&model), "frozen parameters changed");
    Ok(TrainOutcome {
        model,
        steps: state.step,
        metrics_path,
        eval_path,
        checkpoints,
        evals,
        stopped_early,
    })
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step}.bin"))
}

fn save_checkpoint<T: Scalar>(model: &Model<T>, v: &Vocabulary, dir: &Path, step: u64) -> Result<PathBuf, TrainError> {
    let path = checkpoint_path(dir, step);
    model.save(&path, v)?;
    Ok(path)
}
