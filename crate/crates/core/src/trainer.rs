//! The online training loop.
//!
//! Each step: derive the class sets from the incoming labels, draw a replay
//! batch, build the method's loss, take one SGD step, and only then offer the
//! incoming batch to the buffer.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::LabeledBatch;
use crate::buffer::ReplayBuffer;
use crate::error::{Error, Result};
use crate::losses::{self, ClassIndexSets, LossConfig, LossOutput, Method};
use crate::metrics::{
    self, FlopEvent, FlopModel, MetricsLog, ResourceLedger, StepValue,
};
use crate::network::{self, ModelParams, ParamGrads, DEFAULT_FEATURE_DIM, DEFAULT_HIDDEN, DEFAULT_TAU};
use crate::par::Execution;
use crate::stream::{self, Dataset, StreamConfig, StreamMetadata};
use crate::tensor::Tape;

/// Best mean validation accuracy over methods and buffer sizes on the
/// reference benchmark among {0.1, 0.05, 0.01, 0.001}; see
/// `examples/lr_sweep.rs` and `results/lr_sweep.tsv`.
pub const DEFAULT_LR: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

fn default_feature_dim() -> usize {
    DEFAULT_FEATURE_DIM
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: default_hidden(),
            feature_dim: default_feature_dim(),
            tau: default_tau(),
        }
    }
}

impl ModelConfig {
    pub fn sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut s = vec![input_dim];
        s.extend(&self.hidden);
        s.push(self.feature_dim);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub loss: LossConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_replay_batch")]
    pub replay_batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_buffer_size")]
    pub buffer_size: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub seed: u64,
    /// Record one-step drift of old-class buffered examples every step.
    #[serde(default = "yes")]
    pub track_drift: bool,
    #[serde(default = "yes")]
    pub track_grad_norms: bool,
    #[serde(default)]
    pub execution: Execution,
}

fn default_lr() -> f64 {
    DEFAULT_LR
}

fn default_replay_batch() -> usize {
    10
}

fn default_eval_every() -> usize {
    10
}

fn default_buffer_size() -> usize {
    100
}

fn yes() -> bool {
    true
}

impl TrainerConfig {
    pub fn new(loss: LossConfig) -> Self {
        TrainerConfig {
            loss,
            lr: default_lr(),
            replay_batch_size: default_replay_batch(),
            eval_every: default_eval_every(),
            buffer_size: default_buffer_size(),
            model: ModelConfig::default(),
            seed: 0,
            track_drift: true,
            track_grad_norms: true,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr: must be finite and ≥ 0, got {}", self.lr)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every: must be ≥ 1".into()));
        }
        if self.model.tau.is_nan() || self.model.tau <= 0.0 || self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            return Err(Error::Config("model: sizes must be ≥ 1 and tau > 0".into()));
        }
        Ok(())
    }
}

/// Independent random streams derived from one seed.
fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_BUFFER: u64 = 1;
const STREAM_REPLAY: u64 = 2;
const STREAM_POSNEG: u64 = 3;

/// Mutable state of one run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub step: usize,
    pub model: ModelParams,
    pub buffer: ReplayBuffer,
    pub observed: Vec<bool>,
    pub ledger: ResourceLedger,
    pub flop_model: FlopModel,
    replay_rng: ChaCha8Rng,
    posneg_rng: ChaCha8Rng,
}

impl RunState {
    pub fn new(model: ModelParams, cfg: &TrainerConfig) -> Self {
        let dim = model.input_dim();
        let classes = model.num_classes();
        RunState {
            step: 0,
            flop_model: FlopModel::for_model(&model),
            buffer: ReplayBuffer::new(cfg.buffer_size, dim, rng(cfg.seed, STREAM_BUFFER).next_u64()),
            observed: vec![false; classes],
            ledger: ResourceLedger::default(),
            replay_rng: rng(cfg.seed, STREAM_REPLAY),
            posneg_rng: rng(cfg.seed, STREAM_POSNEG),
            model,
        }
    }

    /// Fresh state with parameters initialised from `cfg.seed`.
    pub fn init(dataset: &Dataset, cfg: &TrainerConfig) -> Result<Self> {
        let sizes = cfg.model.sizes(dataset.input_dim);
        let model = network::init_params(&sizes, dataset.num_classes, cfg.model.tau, cfg.seed)?;
        Ok(RunState::new(model, cfg))
    }
}

/// What one step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub replay: usize,
    pub extra_forwards: usize,
    pub skipped_anchors: usize,
    pub drift: Option<f64>,
    pub old_feature_grad_norm: Option<f64>,
    pub old_prototype_grad_norm: Option<f64>,
}

/// Plain SGD: `θ ← θ − α·∇`.
pub fn sgd_update(model: &mut ModelParams, grads: &ParamGrads, lr: f64) {
    for (t, g) in model.tensors_mut().zip(grads.iter()) {
        for (p, gv) in t.data_mut().iter_mut().zip(g) {
            *p -= lr * gv;
        }
    }
}

/// Builds the step loss for `cfg.method` on a fresh tape.
#[allow(clippy::too_many_arguments)]
pub fn build_loss(
    tape: &mut Tape,
    state: &mut RunState,
    bound: &network::BoundModel,
    x_in: &LabeledBatch,
    x_bf: &LabeledBatch,
    sets: &ClassIndexSets,
    cfg: &LossConfig,
    task_of_class: &[usize],
) -> Result<LossOutput> {
    match cfg.method {
        Method::Er => losses::er_loss(tape, bound, x_in, x_bf),
        Method::ErAce => losses::er_ace_loss(tape, bound, x_in, x_bf, sets),
        Method::SsilNodistill => losses::ssil_nodistill_loss(tape, bound, x_in, x_bf, sets, task_of_class),
        Method::ErAml | Method::ErAmlTriplet => {
            let plan = state.buffer.fetch_pos_neg(x_in, cfg.negative_policy, &mut state.posneg_rng);
            let extra = state.buffer.gather(&plan.extra_slots);
            losses::er_aml_loss(tape, bound, x_in, x_bf, &plan, &extra, cfg)
        }
    }
}

/// One online update on the incoming batch `x_in`.
pub fn train_step(
    state: &mut RunState,
    x_in: &LabeledBatch,
    cfg: &TrainerConfig,
    meta: &StreamMetadata,
) -> Result<StepLog> {
    let classes = state.model.num_classes();
    let sets = ClassIndexSets::derive(classes, &x_in.labels, &state.observed);
    for &y in &x_in.labels {
        state.observed[y] = true;
    }
    let replay_slots = state.buffer.sample_slots(cfg.replay_batch_size, &mut state.replay_rng);
    let x_bf = state.buffer.gather(&replay_slots);

    let mut tape = Tape::new();
    let bound = state.model.bind(&mut tape);
    let out = build_loss(&mut tape, state, &bound, x_in, &x_bf, &sets, &cfg.loss, &meta.task_of_class)?;
    let loss = tape.value(out.loss).item();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            method: cfg.loss.method.to_string(),
            loss,
        });
    }
    tape.backward(out.loss)?;
    let grads = bound.grads(&tape);

    let has_old = sets.old.iter().any(|&o| o);
    let (feat_norm, proto_norm) = if cfg.track_grad_norms && has_old {
        let rows: Vec<usize> = (out.layout.incoming..out.layout.total())
            .filter(|&r| sets.old[out.layout.labels[r]])
            .collect();
        let f = metrics::old_feature_grad_norm(&tape, out.features, &rows);
        let old: Vec<usize> = (0..classes).filter(|&c| sets.old[c]).collect();
        let p = metrics::old_feature_grad_norm(&tape, bound.prototypes, &old);
        (Some(f), Some(p))
    } else {
        (None, None)
    };

    let probes = if cfg.track_drift && has_old {
        let slots: Vec<usize> = (0..state.buffer.len())
            .filter(|&s| sets.old[state.buffer.label(s)])
            .collect();
        Some(state.buffer.gather(&slots)).filter(|b| !b.is_empty())
    } else {
        None
    };
    let before = probes.as_ref().map(|p| state.model.features(p)).transpose()?;

    sgd_update(&mut state.model, &grads, cfg.lr);

    let drift = match (&probes, before) {
        (Some(p), Some(b)) => {
            let after = state.model.features(p)?;
            Some(metrics::feature_drift(&normalized(&b), &normalized(&after)))
        }
        _ => None,
    };

    state.buffer.reservoir_update(x_in);

    let n = out.layout.total();
    state.ledger.charge(&state.flop_model, FlopEvent::Forward(n));
    state.ledger.charge(&state.flop_model, FlopEvent::Backward(n));
    state.ledger.record_memory(metrics::memory_bytes(
        state.model.param_count(),
        state.buffer.len(),
        state.model.input_dim(),
    ));

    let log = StepLog {
        step: state.step,
        loss,
        replay: out.layout.replay,
        extra_forwards: out.layout.extra,
        skipped_anchors: out.skipped_anchors,
        drift,
        old_feature_grad_norm: feat_norm,
        old_prototype_grad_norm: proto_norm,
    };
    state.step += 1;
    Ok(log)
}

fn normalized(t: &crate::tensor::Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::tensor::NORM_EPS);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Test examples grouped by task.
pub fn test_sets_by_task(dataset: &Dataset, meta: &StreamMetadata) -> Vec<LabeledBatch> {
    (0..meta.num_tasks())
        .map(|t| {
            let idx: Vec<usize> = (0..dataset.test.len())
                .filter(|&i| meta.task_of_class[dataset.test.labels[i]] == t)
                .collect();
            dataset.test.select(&idx)
        })
        .collect()
}

/// Result of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub method: Method,
    pub metrics: MetricsLog,
    pub ledger: ResourceLedger,
    pub flops_per_sample_forward: u64,
    pub param_count: usize,
    pub total_steps: usize,
    pub examples_consumed: usize,
    pub stream: StreamMetadata,
}

impl RunReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.metrics.final_accuracy()
    }
}

/// Evaluates on every task seen so far and appends to the log.
pub fn evaluate(
    state: &mut RunState,
    tests: &[LabeledBatch],
    meta: &StreamMetadata,
    step: usize,
    exec: Execution,
    log: &mut MetricsLog,
) -> Result<()> {
    let seen: Vec<usize> = (0..meta.num_tasks())
        .filter(|&t| meta.classes_of_task(t).iter().any(|&c| state.observed[c]))
        .collect();
    if seen.is_empty() {
        return Ok(());
    }
    let last_seen = *seen.last().unwrap();
    let sets: Vec<&LabeledBatch> = (0..=last_seen).map(|t| &tests[t]).collect();
    let acc = metrics::task_accuracies(&state.model, &sets, exec)?;
    let evaluated: usize = sets.iter().map(|b| b.len()).sum();
    state.ledger.charge(&state.flop_model, FlopEvent::EvalForward(evaluated));
    log.eval_steps.push(step);
    log.anytime_accuracy.push(metrics::anytime_accuracy(&acc));
    let current = meta.task_at(step).min(last_seen);
    log.current_task_accuracy.push(acc[current]);
    log.accuracy.push(acc);
    Ok(())
}

/// Runs the whole stream once, evaluating every `eval_every` updates and
/// after the final one.
pub fn run(dataset: &Dataset, stream_cfg: &StreamConfig, cfg: &TrainerConfig) -> Result<RunReport> {
    cfg.validate()?;
    let (batches, meta) = stream::materialize(dataset, stream_cfg)?;
    let mut state = RunState::init(dataset, cfg)?;
    run_batches(&mut state, &batches, &meta, dataset, cfg)
}

/// Training loop over pre-built batches from an existing state.
pub fn run_batches(
    state: &mut RunState,
    batches: &[LabeledBatch],
    meta: &StreamMetadata,
    dataset: &Dataset,
    cfg: &TrainerConfig,
) -> Result<RunReport> {
    let tests = test_sets_by_task(dataset, meta);
    let mut log = MetricsLog::default();
    let mut consumed = 0;
    let total = batches.len();
    for (i, x_in) in batches.iter().enumerate() {
        let s = train_step(state, x_in, cfg, meta)?;
        consumed += x_in.len();
        log.loss.push(s.loss);
        log.skipped_anchors += s.skipped_anchors as u64;
        log.extra_forwards += s.extra_forwards as u64;
        if let Some(v) = s.drift {
            log.drift.push(StepValue { step: s.step, value: v });
        }
        if let Some(v) = s.old_feature_grad_norm {
            log.old_feature_grad_norm.push(StepValue { step: s.step, value: v });
        }
        if let Some(v) = s.old_prototype_grad_norm {
            log.old_prototype_grad_norm.push(StepValue { step: s.step, value: v });
        }
        if (i + 1) % cfg.eval_every == 0 || i + 1 == total {
            evaluate(state, &tests, meta, x_in.step, cfg.execution, &mut log)?;
        }
    }
    log.alignment = Some(metrics::buffer_holdout_alignment(
        &state.model,
        state.buffer.contents(),
        &dataset.validation,
        &meta.task_of_class,
    )?);
    Ok(RunReport {
        seed: cfg.seed,
        method: cfg.loss.method,
        metrics: log,
        ledger: state.ledger.clone(),
        flops_per_sample_forward: state.flop_model.forward_per_sample,
        param_count: state.model.param_count(),
        total_steps: total,
        examples_consumed: consumed,
        stream: meta.clone(),
    })
}
