//! Accuracy traces, forgetting, representation drift, gradient capture and
//! the resource ledgers.

use serde::{Deserialize, Serialize};

use crate::batch::LabeledBatch;
use crate::error::Result;
use crate::network::ModelParams;
use crate::par::{self, Execution};
use crate::tensor::{Tape, Tensor, Var, NORM_EPS};

/// Fraction of `batch` predicted correctly (N-way over the whole universe).
pub fn accuracy(model: &ModelParams, batch: &LabeledBatch) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let pred = model.predict(batch)?;
    let hits = pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Per-task test accuracies for the given task test sets.
pub fn task_accuracies(model: &ModelParams, tests: &[&LabeledBatch], exec: Execution) -> Result<Vec<f64>> {
    par::map(tests, exec, |b| accuracy(model, b)).into_iter().collect()
}

/// Unweighted mean over the distributions seen so far.
pub fn anytime_accuracy(per_task: &[f64]) -> f64 {
    per_task.iter().sum::<f64>() / per_task.len() as f64
}

/// Mean of the recorded anytime-accuracy trace; `None` when empty.
pub fn averaged_anytime_accuracy(trace: &[f64]) -> Option<f64> {
    (!trace.is_empty()).then(|| trace.iter().sum::<f64>() / trace.len() as f64)
}

/// Average drop from best earlier accuracy to final accuracy over every task
/// but the last one seen. `matrix[e][j]` is the accuracy on task `j` at
/// evaluation `e`; rows grow as tasks are seen. `None` with fewer than two
/// tasks in the final row.
pub fn forgetting(matrix: &[Vec<f64>]) -> Option<f64> {
    let last = matrix.last()?;
    if last.len() < 2 {
        return None;
    }
    let earlier = &matrix[..matrix.len() - 1];
    let drops: Vec<f64> = (0..last.len() - 1)
        .filter_map(|j| {
            let best = earlier
                .iter()
                .filter_map(|row| row.get(j).copied())
                .fold(f64::NEG_INFINITY, f64::max);
            (best > f64::NEG_INFINITY).then(|| best - last[j])
        })
        .collect();
    (!drops.is_empty()).then(|| drops.iter().sum::<f64>() / drops.len() as f64)
}

fn normalized_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Mean distance between l2-normalised features of `probes` under two
/// parameter snapshots.
pub fn one_step_drift(before: &ModelParams, after: &ModelParams, probes: &LabeledBatch) -> Result<f64> {
    if probes.is_empty() {
        return Ok(0.0);
    }
    let a = normalized_rows(&before.features(probes)?);
    let b = normalized_rows(&after.features(probes)?);
    Ok(feature_drift(&a, &b))
}

/// Mean Euclidean distance between paired rows.
pub fn feature_drift(before: &[Vec<f64>], after: &[Vec<f64>]) -> f64 {
    let total: f64 = before
        .iter()
        .zip(after)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum();
    total / before.len() as f64
}

/// Mean l2 norm of the gradient rows `rows` of `v` after backward. Rows that
/// never received a gradient count as zero; no rows gives 0.
pub fn old_feature_grad_norm(tape: &Tape, v: Var, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let Some(g) = tape.grad(v) else { return 0.0 };
    let d = tape.value(v).cols();
    let total: f64 = rows
        .iter()
        .map(|&r| g[r * d..(r + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum();
    total / rows.len() as f64
}

/// Per-task mean of the best same-class cosine between each buffered example
/// and the validation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `None` for tasks with no buffered example.
    pub per_task: Vec<Option<f64>>,
    /// Buffered examples whose class is absent from validation.
    pub skipped: usize,
}

pub fn buffer_holdout_alignment(
    model: &ModelParams,
    buffer: &LabeledBatch,
    validation: &LabeledBatch,
    task_of_class: &[usize],
) -> Result<Alignment> {
    let num_tasks = task_of_class.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![0.0; num_tasks];
    let mut counts = vec![0usize; num_tasks];
    let mut skipped = 0;
    if buffer.is_empty() {
        return Ok(Alignment {
            per_task: vec![None; num_tasks],
            skipped,
        });
    }
    let fb = normalized_rows(&model.features(buffer)?);
    let fv = if validation.is_empty() {
        Vec::new()
    } else {
        normalized_rows(&model.features(validation)?)
    };
    for (i, &y) in buffer.labels.iter().enumerate() {
        let best = validation
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == y)
            .map(|(j, _)| fb[i].iter().zip(&fv[j]).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        if best == f64::NEG_INFINITY {
            skipped += 1;
            continue;
        }
        sums[task_of_class[y]] += best;
        counts[task_of_class[y]] += 1;
    }
    Ok(Alignment {
        per_task: sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
        skipped,
    })
}

/// Analytic per-sample cost of one forward pass.
///
/// A dense `in → out` layer costs `2·in·out` multiply-adds plus `out` bias
/// additions; relu costs one op per activation; l2 normalisation of a
/// `d`-vector costs `3·d`; the head costs `2·d·C` for the cosine products plus
/// `C` for the temperature scaling. Backward is charged at twice forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopModel {
    pub forward_per_sample: u64,
}

pub fn dense_flops(fan_in: usize, fan_out: usize) -> u64 {
    (2 * fan_in * fan_out + fan_out) as u64
}

impl FlopModel {
    pub fn new(sizes: &[usize], num_classes: usize) -> Self {
        let mut f: u64 = sizes.windows(2).map(|w| dense_flops(w[0], w[1])).sum();
        let hidden = &sizes[1..sizes.len() - 1];
        f += hidden.iter().map(|&h| h as u64).sum::<u64>();
        let d = *sizes.last().unwrap();
        f += 3 * d as u64;
        f += (2 * d * num_classes + num_classes) as u64;
        FlopModel { forward_per_sample: f }
    }

    pub fn for_model(model: &ModelParams) -> Self {
        FlopModel::new(model.extractor.sizes(), model.num_classes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopEvent {
    Forward(usize),
    Backward(usize),
    EvalForward(usize),
}

/// Cumulative compute and memory accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ResourceLedger {
    pub train_flops: u64,
    pub inference_flops: u64,
    /// Σ over steps of `bytes(θ) + bytes(M_t)`.
    pub memory_byte_steps: u64,
    pub steps: u64,
}

impl ResourceLedger {
    pub fn charge(&mut self, model: &FlopModel, event: FlopEvent) {
        let f = model.forward_per_sample;
        match event {
            FlopEvent::Forward(n) => self.train_flops += n as u64 * f,
            FlopEvent::Backward(n) => self.train_flops += 2 * n as u64 * f,
            FlopEvent::EvalForward(n) => self.inference_flops += n as u64 * f,
        }
    }

    pub fn record_memory(&mut self, bytes: u64) {
        self.memory_byte_steps += bytes;
        self.steps += 1;
    }

    /// Mean memory footprint over recorded steps, in bytes.
    pub fn mean_memory_bytes(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.memory_byte_steps as f64 / self.steps as f64
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.train_flops + self.inference_flops
    }
}

pub fn flops_charge(ledger: &mut ResourceLedger, model: &FlopModel, event: FlopEvent) {
    ledger.charge(model, event);
}

/// Bytes held by parameters and buffer: 8 per scalar parameter, `8·dim + 8`
/// per buffered example (inputs plus label).
pub fn memory_bytes(param_count: usize, buffer_len: usize, input_dim: usize) -> u64 {
    (8 * param_count + buffer_len * (8 * input_dim + 8)) as u64
}

/// A value recorded at a training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepValue {
    pub step: usize,
    pub value: f64,
}

/// Every metric trace of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsLog {
    pub eval_steps: Vec<usize>,
    /// `accuracy[e][j]`: task `j` at evaluation `e`, for tasks seen by then.
    pub accuracy: Vec<Vec<f64>>,
    pub anytime_accuracy: Vec<f64>,
    /// Accuracy on the task active at each evaluation.
    pub current_task_accuracy: Vec<f64>,
    pub drift: Vec<StepValue>,
    /// Mean gradient norm of old-class sample features in the step's loss.
    pub old_feature_grad_norm: Vec<StepValue>,
    /// Mean gradient norm of old-class prototypes.
    pub old_prototype_grad_norm: Vec<StepValue>,
    pub loss: Vec<f64>,
    pub skipped_anchors: u64,
    /// Buffered positives/negatives forwarded by the metric loss.
    pub extra_forwards: u64,
    pub alignment: Option<Alignment>,
}

impl MetricsLog {
    pub fn aaa(&self) -> Option<f64> {
        averaged_anytime_accuracy(&self.anytime_accuracy)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.anytime_accuracy.last().copied()
    }

    pub fn forgetting(&self) -> Option<f64> {
        forgetting(&self.accuracy)
    }

    pub fn mean_current_task_accuracy(&self) -> Option<f64> {
        averaged_anytime_accuracy(&self.current_task_accuracy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;

    #[test]
    fn anytime_and_averaged() {
        assert!((anytime_accuracy(&[0.8, 0.6]) - 0.7).abs() < 1e-15);
        assert_eq!(anytime_accuracy(&[0.55]), 0.55);
        assert!((averaged_anytime_accuracy(&[0.8, 0.6, 0.4]).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(averaged_anytime_accuracy(&[0.3; 7]), Some(0.3));
        assert_eq!(averaged_anytime_accuracy(&[]), None);
    }

    #[test]
    fn forgetting_cases() {
        let g = forgetting(&[vec![0.5], vec![0.6, 0.7], vec![0.9, 0.8]]).unwrap();
        assert!((g + 0.3).abs() < 1e-15, "improvement is negative forgetting");
        assert_eq!(forgetting(&[vec![0.5], vec![0.5, 0.7], vec![0.5, 0.8]]), Some(0.0));
        let f = forgetting(&[vec![0.9], vec![0.5, 0.8]]).unwrap();
        assert!((f - 0.4).abs() < 1e-15);
        assert_eq!(forgetting(&[vec![0.9], vec![0.4]]), None);
    }

    #[test]
    fn drift_of_identical_models_is_zero() {
        let m = init_params(&[3, 8, 4], 2, 0.1, 0).unwrap();
        let b = LabeledBatch::new(3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5], vec![0, 1]);
        assert_eq!(one_step_drift(&m, &m, &b).unwrap(), 0.0);
        let d = feature_drift(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]]);
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn flop_conventions() {
        assert_eq!(dense_flops(4, 3), 27);
        let fm = FlopModel { forward_per_sample: 100 };
        let mut l = ResourceLedger::default();
        flops_charge(&mut l, &fm, FlopEvent::Forward(20));
        flops_charge(&mut l, &fm, FlopEvent::Backward(20));
        assert_eq!(l.train_flops, 3 * 20 * 100);
        flops_charge(&mut l, &fm, FlopEvent::EvalForward(5));
        assert_eq!(l.inference_flops, 500);
    }

    #[test]
    fn alignment_of_constant_features_is_one() {
        let mut m = init_params(&[2, 2], 2, 0.1, 0).unwrap();
        let l = &mut m.extractor.layers[0];
        l.weight.data_mut().fill(0.0);
        l.bias.data_mut().copy_from_slice(&[1.0, 2.0]);
        let buf = LabeledBatch::new(2, vec![1.0, 0.0, 0.0, 1.0], vec![0, 1]);
        let val = LabeledBatch::new(2, vec![5.0, 5.0, -3.0, 1.0], vec![0, 1]);
        let a = buffer_holdout_alignment(&m, &buf, &val, &[0, 1]).unwrap();
        for v in a.per_task {
            assert!((v.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_skips_missing_classes() {
        let m = init_params(&[2, 3], 3, 0.1, 0).unwrap();
        let buf = LabeledBatch::new(2, vec![1.0, 0.0, 0.0, 1.0], vec![0, 2]);
        let val = LabeledBatch::new(2, vec![1.0, 0.0], vec![0]);
        let a = buffer_holdout_alignment(&m, &buf, &val, &[0, 0, 1]).unwrap();
        assert_eq!(a.skipped, 1);
        assert!((a.per_task[0].unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(a.per_task[1], None);
    }
}
