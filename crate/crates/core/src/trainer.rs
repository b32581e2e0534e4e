//! Two-phase training of the classifier/querier pair.
//!
//! Phase one samples histories as uniform random subsets; phase two samples
//! them by rolling out the current querier. In both phases the loss is the
//! cross entropy of the classifier after the querier's straight-through
//! selection has appended one more answer to the sampled history.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{split, Dataset, Row};
use crate::diffcore::{Adam, CosineLrSchedule, Optimizer, Sgd, Tape, Tensor};
use crate::networks::{differentiable_history_update, straight_through_select, ClassifierNet, QuerierNet};
use crate::pursuit::{batch_evaluate, Strategy};
use crate::query::History;
use crate::rng::{derive_seed, stream_rng};
use crate::sampler::{sample_batch, SamplerConfig, SamplingMode};
use crate::{Error, Result};

const TAG_INIT: u64 = 0x696e6974;
const TAG_SPLIT: u64 = 0x73706c74;
const TAG_SHUFFLE: u64 = 0x73687566;
const TAG_SAMPLE: u64 = 0x736d706c;

/// Seed used by [`evaluate_loss`] when the caller does not pick one.
pub const EVAL_SEED: u64 = 0x6576616c;
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default = "default_true")]
        amsgrad: bool,
    },
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_true() -> bool {
    true
}
fn default_momentum() -> f64 {
    0.9
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            amsgrad: true,
        }
    }
}

impl OptimizerConfig {
    /// SGD with momentum 0.9, the alternative for the biased phase.
    pub fn sgd() -> Self {
        OptimizerConfig::Sgd { momentum: 0.9 }
    }

    fn build(&self) -> Box<dyn Optimizer> {
        match *self {
            OptimizerConfig::Adam {
                beta1,
                beta2,
                weight_decay,
                amsgrad,
            } => Box::new(Adam::new(beta1, beta2, weight_decay, amsgrad)),
            OptimizerConfig::Sgd { momentum } => Box::new(Sgd::new(momentum)),
        }
    }
}

/// Training hyperparameters. Every field has a default, so a JSON config
/// only needs the fields it changes. [`Default`] is the full-scale profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_initial: usize,
    pub epochs_biased: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    /// Optimizer for the biased phase; `None` reuses `optimizer`. Either way
    /// the phase starts from fresh optimizer state.
    pub biased_optimizer: Option<OptimizerConfig>,
    /// Learning rate for the biased phase; `None` reuses `lr`.
    pub biased_lr: Option<f64>,
    /// Cosine period in epochs, restarted at each phase.
    pub lr_t_max: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub classifier_hidden: Vec<usize>,
    pub querier_hidden: Vec<usize>,
    /// Held-out share of the training rows; 0 disables validation.
    pub validation_fraction: f64,
    /// Query budget for the per-epoch validation accuracy; `None` picks
    /// `min(5, |Q|)`.
    pub validation_budget: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::full()
    }
}

impl TrainConfig {
    /// 500 + 100 epochs, batch 128, lr 1e-4, two hidden layers of 512.
    pub fn full() -> Self {
        TrainConfig {
            epochs_initial: 500,
            epochs_biased: 100,
            batch_size: 128,
            lr: 1e-4,
            optimizer: OptimizerConfig::default(),
            biased_optimizer: None,
            biased_lr: None,
            lr_t_max: 50,
            tau_start: 1.0,
            tau_end: 0.2,
            classifier_hidden: vec![512, 512],
            querier_hidden: vec![512, 512],
            validation_fraction: 0.1,
            validation_budget: None,
            seed: 0,
        }
    }

    /// Desk-scale schedule: minutes instead of hours.
    pub fn fast() -> Self {
        TrainConfig {
            epochs_initial: 100,
            epochs_biased: 50,
            batch_size: 64,
            lr: 1e-3,
            lr_t_max: 100,
            classifier_hidden: vec![128, 128],
            querier_hidden: vec![128, 128],
            ..TrainConfig::full()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(TrainConfig::full()),
            "fast" => Ok(TrainConfig::fast()),
            other => Err(Error::InvalidConfig(format!("unknown training profile {other:?}"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, lr) in [("lr", Some(self.lr)), ("biased_lr", self.biased_lr)] {
            if let Some(lr) = lr {
                if !(lr > 0.0 && lr.is_finite()) {
                    return bad(format!("{name} must be positive, got {lr}"));
                }
            }
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        if self.classifier_hidden.contains(&0) || self.querier_hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if self.validation_budget == Some(0) {
            return bad("validation_budget must be positive".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Temperature for epoch `e` of a phase lasting `epochs`: linear from
    /// `tau_start` at the first epoch to `tau_end` at the last.
    pub fn tau(&self, e: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.tau_start;
        }
        let t = e as f64 / (epochs - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: SamplingMode,
    pub phase_epoch: usize,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
    pub lr: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub validation_budget: usize,
    pub wall_time_secs: f64,
    pub config_fingerprint: String,
    /// Where the resulting checkpoint was written, if it was.
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// One JSON object per epoch.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for record in &self.epochs {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Compares everything except wall time.
    pub fn same_run(&self, other: &TrainReport) -> bool {
        self.epochs == other.epochs
            && self.validation_budget == other.validation_budget
            && self.config_fingerprint == other.config_fingerprint
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub classifier: ClassifierNet,
    pub querier: QuerierNet,
    pub report: TrainReport,
}

/// Recorded loss with handles to the parameter leaves, classifier first.
pub struct LossGraph {
    pub tape: Tape,
    pub loss: crate::diffcore::Var,
    pub classifier_params: Vec<crate::diffcore::Var>,
    pub querier_params: Vec<crate::diffcore::Var>,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss).item()
    }

    /// Backpropagates and returns gradients in parameter order, classifier
    /// first.
    pub fn gradients(mut self) -> Result<Vec<Tensor>> {
        self.tape.backward(self.loss)?;
        let tape = &self.tape;
        Ok(self
            .classifier_params
            .iter()
            .chain(&self.querier_params)
            .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros_like(tape.value(v))))
            .collect())
    }
}

/// Records the loss for `rows` with one sampled history per row.
///
/// The querier scores each history; the straight-through one-hot over its
/// unasked queries picks one answer from the row, which is added to the
/// masked history before the classifier runs. A history that already holds
/// every answer is passed to the classifier unchanged.
pub fn vip_loss_graph(
    rows: &[&Row],
    histories: &[History],
    classifier: &ClassifierNet,
    querier: &QuerierNet,
    tau: f64,
) -> Result<LossGraph> {
    if rows.len() != histories.len() {
        return Err(Error::ShapeMismatch {
            op: "vip_loss",
            lhs: vec![rows.len()],
            rhs: vec![histories.len()],
        });
    }
    let n = querier.num_queries();
    for (r, h) in rows.iter().zip(histories) {
        if r.answers.len() != n || h.num_queries() != n || classifier.num_queries() != n {
            return Err(Error::ShapeMismatch {
                op: "vip_loss",
                lhs: vec![r.answers.len(), h.num_queries()],
                rhs: vec![n, classifier.num_queries()],
            });
        }
    }
    let b = rows.len();
    let mut masked = Vec::with_capacity(b * n);
    let mut available = Vec::with_capacity(b * n);
    let mut mask = Vec::with_capacity(b * n);
    for (r, h) in rows.iter().zip(histories) {
        masked.extend(h.to_masked_vector());
        let full = h.len() == n;
        for q in 0..n {
            let asked = h.is_asked(q);
            mask.push(asked && !full);
            available.push(if asked { 0.0 } else { r.answers.get(q) });
        }
    }
    let mut tape = Tape::new();
    let history = tape.constant(Tensor::matrix(b, n, masked)?);
    let answers = tape.constant(Tensor::matrix(b, n, available)?);
    let (scores, querier_params) = querier.mlp().forward_tape(&mut tape, history)?;
    let one_hot = straight_through_select(&mut tape, scores, tau, Some(&mask))?;
    let updated = differentiable_history_update(&mut tape, history, one_hot, answers)?;
    let (logits, classifier_params) = classifier.mlp().forward_tape(&mut tape, updated)?;
    let labels: Vec<usize> = rows.iter().map(|r| r.label).collect();
    let loss = tape.cross_entropy(logits, &labels)?;
    Ok(LossGraph {
        tape,
        loss,
        classifier_params,
        querier_params,
    })
}

/// Mean cross entropy in nats; see [`vip_loss_graph`].
pub fn vip_loss(
    rows: &[&Row],
    histories: &[History],
    classifier: &ClassifierNet,
    querier: &QuerierNet,
    tau: f64,
) -> Result<f64> {
    Ok(vip_loss_graph(rows, histories, classifier, querier, tau)?.value())
}

/// Mean loss over `dataset` with histories drawn by `sampler`, row `i` on
/// stream `i`. Batching does not affect the sampled histories.
pub fn evaluate_loss(
    dataset: &Dataset,
    classifier: &ClassifierNet,
    querier: &QuerierNet,
    sampler: &SamplerConfig,
) -> Result<f64> {
    evaluate_loss_batched(dataset, classifier, querier, sampler, EVAL_BATCH)
}

pub fn evaluate_loss_batched(
    dataset: &Dataset,
    classifier: &ClassifierNet,
    querier: &QuerierNet,
    sampler: &SamplerConfig,
    batch_size: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (chunk_index, chunk) in dataset.rows().chunks(batch_size.max(1)).enumerate() {
        let rows: Vec<&Row> = chunk.iter().collect();
        let xs: Vec<_> = chunk.iter().map(|r| &r.answers).collect();
        let first = (chunk_index * batch_size.max(1)) as u64;
        let histories = sample_batch(&xs, sampler, Some(querier), first)?;
        total += vip_loss(&rows, &histories, classifier, querier, 1.0)? * rows.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

/// Initial networks for `config`, before any update.
pub fn init_networks(num_queries: usize, num_labels: usize, config: &TrainConfig) -> Result<(ClassifierNet, QuerierNet)> {
    let mut rng = stream_rng(derive_seed(config.seed, TAG_INIT), 0);
    let classifier = ClassifierNet::new(num_queries, &config.classifier_hidden, num_labels, &mut rng)?;
    let querier = QuerierNet::new(num_queries, &config.querier_hidden, &mut rng)?;
    Ok((classifier, querier))
}

/// Splits off the validation rows and trains on the rest.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let holdout = (config.validation_fraction * dataset.len() as f64).round() as usize;
    if config.validation_fraction > 0.0 && holdout > 0 && holdout < dataset.len() {
        let (fit, val) = split(dataset, 1.0 - config.validation_fraction, derive_seed(config.seed, TAG_SPLIT))?;
        train_with_validation(&fit, Some(&val), config)
    } else {
        train_with_validation(dataset, None, config)
    }
}

pub fn train_with_validation(dataset: &Dataset, validation: Option<&Dataset>, config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.num_labels() < 2 {
        return Err(Error::InvalidConfig("training needs at least two labels".into()));
    }
    let start = Instant::now();
    let n = dataset.num_queries();
    let (mut classifier, mut querier) = init_networks(n, dataset.num_labels(), config)?;
    let validation_budget = config.validation_budget.unwrap_or(5).min(n);
    let mut epochs = Vec::with_capacity(config.epochs_initial + config.epochs_biased);

    let phases = [
        (SamplingMode::InitialRandom, config.epochs_initial, &config.optimizer, config.lr),
        (
            SamplingMode::Biased,
            config.epochs_biased,
            config.biased_optimizer.as_ref().unwrap_or(&config.optimizer),
            config.biased_lr.unwrap_or(config.lr),
        ),
    ];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for (mode, phase_epochs, optimizer, base_lr) in phases {
        let mut optimizer = optimizer.build();
        let schedule = CosineLrSchedule {
            base_lr,
            t_max: config.lr_t_max,
        };
        for phase_epoch in 0..phase_epochs {
            let epoch = epochs.len();
            let lr = schedule.lr(phase_epoch);
            let tau = config.tau(phase_epoch, phase_epochs);
            order.shuffle(&mut stream_rng(derive_seed(config.seed, TAG_SHUFFLE), epoch as u64));
            let sampler = SamplerConfig {
                mode,
                seed: derive_seed(derive_seed(config.seed, TAG_SAMPLE), epoch as u64),
            };
            let mut total = 0.0;
            for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
                let rows: Vec<&Row> = batch.iter().map(|&i| &dataset.rows()[i]).collect();
                let xs: Vec<_> = rows.iter().map(|r| &r.answers).collect();
                let first = (batch_index * config.batch_size) as u64;
                let histories = sample_batch(&xs, &sampler, Some(&querier), first)?;
                let graph = vip_loss_graph(&rows, &histories, &classifier, &querier, tau)?;
                total += graph.value() * rows.len() as f64;
                let grads = graph.gradients()?;
                let grad_refs: Vec<&Tensor> = grads.iter().collect();
                let mut params: Vec<&mut Tensor> = classifier.mlp_mut().parameters_mut();
                params.extend(querier.mlp_mut().parameters_mut());
                optimizer.step(&mut params, &grad_refs, lr)?;
            }
            let val_accuracy = match validation {
                Some(val) if !val.is_empty() => Some(
                    batch_evaluate(val.rows(), &Strategy::Learned(&querier), &classifier, &[validation_budget])?[0],
                ),
                _ => None,
            };
            epochs.push(EpochRecord {
                epoch,
                phase: mode,
                phase_epoch,
                loss: total / dataset.len() as f64,
                val_accuracy,
                lr,
                tau,
            });
        }
    }

    Ok(Trained {
        classifier,
        querier,
        report: TrainReport {
            epochs,
            validation_budget,
            wall_time_secs: start.elapsed().as_secs_f64(),
            config_fingerprint: config.fingerprint(),
            checkpoint: None,
        },
    })
}
