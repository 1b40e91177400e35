//! End-to-end training: batched log loss over retrieved contexts,
//! geometric temperature annealing and learning-rate decay, L2 weight
//! decay, and early stopping on validation AUC.

use crate::data::{Dataset, DatasetSplit, Task};
use crate::evaluation::{compute_metrics, MetricReport};
use crate::model::{LabelChannel, Model, ModelConfig, ModelError, NoisePlan};
use crate::params::{AdamState, ParamError};
use crate::search::{build_context, EmbeddingView, RetrievedContext, UserSearchIndex};
use crate::tape::{NodeId, Tape, TapeError};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("empty training split")]
    EmptyTrainSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub l2: f64,
    pub epochs: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub seed: u64,
    /// Early-stopping patience on validation AUC.
    pub patience: usize,
    /// Accuracy decision threshold (dataset-dependent).
    pub acc_threshold: f64,
    /// Heavy-ball momentum; 0 is the plain SGD step.
    pub momentum: f64,
    pub optimizer: Optimizer,
    /// Print an epoch line to stderr as training progresses.
    pub log: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            lr_start: 1e-2,
            lr_end: 1e-6,
            l2: 4e-5,
            epochs: 10,
            tau_start: 0.99,
            tau_end: 0.01,
            seed: 1,
            patience: 3,
            acc_threshold: 0.5,
            momentum: 0.0,
            optimizer: Optimizer::Sgd,
            log: false,
            model: ModelConfig::default(),
        }
    }
}

/// Geometric interpolation from `start` at epoch 0 to `end` at the last
/// epoch; a single-epoch run stays at `start`.
pub fn anneal_temperature(epoch: usize, epochs: usize, start: f64, end: f64) -> f64 {
    if epochs <= 1 {
        return start;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    start * (end / start).powf(t)
}

/// Learning rate at an epoch; same geometric schedule as the
/// temperature, monotone nonincreasing.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    anneal_temperature(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_acc: f64,
    pub val_logloss: f64,
    pub tau: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub diverged: bool,
    pub stopped_early: bool,
}

pub struct TrainOutcome {
    /// Model restored to the best validation checkpoint.
    pub model: Model,
    pub report: TrainReport,
}

/// Sum of per-task log losses over a batch, recorded on `tape`.
/// Returns the loss node plus each task's predicted probability.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &[(RetrievedContext, u8)],
    noise: &[NoisePlan],
    training: bool,
) -> Result<(NodeId, Vec<f64>), TrainError> {
    debug_assert_eq!(batch.len(), noise.len());
    let mut losses = Vec::with_capacity(batch.len());
    let mut probas = Vec::with_capacity(batch.len());
    for ((ctx, label), plan) in batch.iter().zip(noise) {
        let logit = model.predict_logit(tape, ctx, &LabelChannel::Observed, plan, training)?;
        probas.push(crate::model::proba_from_logit(tape.value(logit).as_scalar()));
        losses.push(tape.bce_with_logit(logit, *label as f64)?);
    }
    let stacked = tape.concat(&losses)?;
    Ok((tape.sum(stacked), probas))
}

/// Score a list of tasks in evaluation mode (no dropout; the target
/// stand-in label of the label-trick channel is drawn from a fixed
/// evaluation seed).
pub fn score_tasks(
    model: &Model,
    dataset: &Dataset,
    index: &UserSearchIndex,
    tasks: &[Task],
    tau: f64,
    eval_seed: u64,
) -> Result<(Vec<f64>, Vec<u8>), TrainError> {
    let view = EmbeddingView {
        store: &model.store,
        item_encoder: &model.item_encoder,
        user_encoder: &model.user_encoder,
    };
    let search = model.cfg.effective_search(tau);
    let mut rng = ChaCha12Rng::seed_from_u64(eval_seed);
    let mut scores = Vec::with_capacity(tasks.len());
    let mut labels = Vec::with_capacity(tasks.len());
    for task in tasks {
        let ctx = build_context(dataset, index, *task, &search, &view);
        let noise = NoisePlan {
            target_label: rng.random_range(0..2u8),
            dropout_mask: None,
        };
        let p = model.predict_proba(&ctx, &LabelChannel::Observed, &noise)?;
        scores.push(p);
        labels.push(ctx.target.label);
    }
    Ok((scores, labels))
}

pub fn evaluate_tasks(
    model: &Model,
    dataset: &Dataset,
    index: &UserSearchIndex,
    tasks: &[Task],
    tau: f64,
    eval_seed: u64,
    acc_threshold: f64,
) -> Result<MetricReport, TrainError> {
    let (scores, labels) = score_tasks(model, dataset, index, tasks, tau, eval_seed)?;
    Ok(compute_metrics(&scores, &labels, acc_threshold))
}

/// Run the full training loop over the split's train tasks, evaluating
/// on validation after each epoch. Keeps the best-AUC checkpoint; stops
/// early after `patience` non-improving epochs; aborts (with the last
/// good checkpoint restored) if the loss goes non-finite.
pub fn train(dataset: &Dataset, split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if split.train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let (user_vocab, item_vocab) = dataset.vocab_sizes();
    let mut model = Model::init(cfg.model.clone(), &user_vocab, &item_vocab, cfg.seed);
    let index = UserSearchIndex::build(dataset);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(17));
    let eval_seed = cfg.seed ^ 0x5EED_0EA1u64;

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        diverged: false,
        stopped_early: false,
    };
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_values = model.store.snapshot_values();
    let mut epochs_since_best = 0usize;

    let mut task_order: Vec<Task> = split.train.clone();
    let mut velocity: Vec<crate::tensor::Tensor> = Vec::new();
    let mut adam = AdamState::default();

    'epochs: for epoch in 0..cfg.epochs {
        let tau = anneal_temperature(epoch, cfg.epochs, cfg.tau_start, cfg.tau_end);
        let lr = lr_at(epoch, cfg);
        task_order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut n_tasks = 0usize;
        for chunk in task_order.chunks(cfg.batch_size) {
            let search = model.cfg.effective_search(tau);
            let view = EmbeddingView {
                store: &model.store,
                item_encoder: &model.item_encoder,
                user_encoder: &model.user_encoder,
            };
            let batch: Vec<(RetrievedContext, u8)> = chunk
                .iter()
                .map(|task| {
                    let ctx = build_context(dataset, &index, *task, &search, &view);
                    let label = ctx.target.label;
                    (ctx, label)
                })
                .collect();
            drop(view);
            let noise: Vec<NoisePlan> = (0..batch.len())
                .map(|_| model.draw_noise(&mut rng, true))
                .collect();
            let mut tape = Tape::new();
            let (loss_node, _) = batch_loss(&mut tape, &model, &batch, &noise, true)?;
            let loss = tape.value(loss_node).as_scalar();
            if !loss.is_finite() {
                report.diverged = true;
                break 'epochs;
            }
            epoch_loss += loss;
            n_tasks += batch.len();
            tape.backward(loss_node, &mut model.store)?;
            match cfg.optimizer {
                Optimizer::Sgd => model
                    .store
                    .sgd_update_momentum(lr, cfg.l2, cfg.momentum, &mut velocity)?,
                Optimizer::Adam => model.store.adam_update(lr, cfg.l2, &mut adam)?,
            }
        }

        let metrics = evaluate_tasks(
            &model,
            dataset,
            &index,
            &split.validation,
            tau,
            eval_seed,
            cfg.acc_threshold,
        )?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / n_tasks.max(1) as f64,
            val_auc: metrics.auc,
            val_acc: metrics.acc,
            val_logloss: metrics.logloss,
            tau,
            lr,
        };
        if cfg.log {
            eprintln!(
                "epoch {:>3}  loss {:.4}  val_auc {}  val_acc {:.4}  val_logloss {:.4}  tau {:.4}  lr {:.6}",
                record.epoch,
                record.train_loss,
                record
                    .val_auc
                    .map(|a| format!("{:.4}", a))
                    .unwrap_or_else(|| "-".into()),
                record.val_acc,
                record.val_logloss,
                record.tau,
                record.lr,
            );
        }
        report.epochs.push(record);

        let auc = metrics.auc.unwrap_or(0.0);
        if auc > best_auc {
            best_auc = auc;
            best_values = model.store.snapshot_values();
            report.best_epoch = epoch;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }

    model.store.restore_values(&best_values);
    Ok(TrainOutcome { model, report })
}
