//! Independent oracles shared by the integration tests: central finite
//! differences, plain-loop transcriptions of the losses, and random
//! instance generators. Nothing here calls the tape for reference values.

#![allow(dead_code)]

use asymreplay::batch::LabeledBatch;
use asymreplay::buffer::ReplayBuffer;
use asymreplay::losses::{self, AnchorSets, ClassIndexSets, LossConfig, Method, NegativePolicy};
use asymreplay::network::{init_params, BoundModel, ModelParams};
use asymreplay::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_RTOL: f64 = 1e-4;
/// Absolute floor so that gradients that are zero analytically are not
/// compared purely relatively against O(h²) noise.
pub const FD_ATOL: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform values with magnitude at least `gap`, for inputs fed to kinks.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(gap..2.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn compare_grads(analytic: &[f64], numeric: &[f64]) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!("length {} vs {}", analytic.len(), numeric.len()));
    }
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let tol = FD_RTOL * a.abs().max(n.abs()) + FD_ATOL;
        if (a - n).abs() > tol || !a.is_finite() {
            return Err(format!("entry {i}: analytic {a:e} vs numeric {n:e}"));
        }
    }
    Ok(())
}

/// Checks gradients of a scalar built from leaf tensors of the given shapes.
pub fn check_leaves(
    shapes: &[Vec<usize>],
    values: &[Vec<f64>],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> Result<(), String> {
    let eval = |flat: &[f64], track: bool| {
        let mut tape = Tape::new();
        let mut off = 0;
        let vars: Vec<Var> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), flat[off..off + n].to_vec()).unwrap();
                off += n;
                if track {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let flat: Vec<f64> = values.concat();
    let (mut tape, vars, out) = eval(&flat, true);
    tape.backward(out).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();
    let numeric = central_diff(
        |x| {
            let (tape, _, out) = eval(x, false);
            tape.value(out).item()
        },
        &flat,
        FD_STEP,
    );
    compare_grads(&analytic, &numeric)
}

/// `Σ w ⊙ x` with fixed random weights, so every entry gets a distinct
/// upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &[f64]) -> Var {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(Tensor::new(shape, weights.to_vec()).unwrap());
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

pub fn flatten(model: &ModelParams) -> Vec<f64> {
    model.tensors().flat_map(|t| t.data().to_vec()).collect()
}

pub fn with_params(model: &ModelParams, flat: &[f64]) -> ModelParams {
    let mut m = model.clone();
    let mut off = 0;
    for t in m.tensors_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    m
}

/// Finite-difference check of every model parameter for a loss built on a
/// bound model.
pub fn check_model_loss(
    model: &ModelParams,
    build: impl Fn(&mut Tape, &BoundModel) -> Var,
) -> Result<(), String> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let loss = build(&mut tape, &bound);
    tape.backward(loss).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = bound.grads(&tape).iter().flatten().copied().collect();
    let numeric = central_diff(
        |x| {
            let m = with_params(model, x);
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let loss = build(&mut tape, &bound);
            tape.value(loss).item()
        },
        &flatten(model),
        FD_STEP,
    );
    compare_grads(&analytic, &numeric)
}

/// Smallest |pre-activation| feeding a relu, over all inputs.
pub fn min_relu_margin(model: &ModelParams, batch: &LabeledBatch) -> f64 {
    let mut min = f64::INFINITY;
    let layers = &model.extractor.layers;
    for i in 0..batch.len() {
        let mut h = batch.input(i).to_vec();
        for (k, l) in layers.iter().enumerate() {
            let z = ref_dense(&h, l.weight.data(), l.bias.data());
            if k + 1 < layers.len() {
                min = z.iter().fold(min, |m, v| m.min(v.abs()));
                h = z.into_iter().map(|v| v.max(0.0)).collect();
            } else {
                h = z;
            }
        }
    }
    min
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, labels: &[usize]) -> LabeledBatch {
    let ys: Vec<usize> = (0..n).map(|_| labels[rng.random_range(0..labels.len())]).collect();
    LabeledBatch::new(dim, uniform(rng, n * dim, -1.5, 1.5), ys)
}

pub const SMALL_SIZES: [usize; 3] = [4, 6, 5];
pub const SMALL_CLASSES: usize = 4;
/// Two classes per task for the small instances.
pub const SMALL_TASKS: [usize; 4] = [0, 0, 1, 1];

/// One random two-task state: current classes {2, 3}, old classes {0, 1}.
pub struct Instance {
    pub model: ModelParams,
    pub x_in: LabeledBatch,
    pub x_bf: LabeledBatch,
    pub sets: ClassIndexSets,
    pub buffer: ReplayBuffer,
}

/// Draws instances until the relu pre-activations clear the finite-difference
/// step by a wide margin, so that no kink falls inside `x ± h`, and no feature
/// vector is near the origin where normalisation is singular.
pub fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    loop {
        let mut model = init_params(&SMALL_SIZES, SMALL_CLASSES, 0.5, r.random()).unwrap();
        for l in &mut model.extractor.layers {
            let n = l.bias.numel();
            l.bias.data_mut().copy_from_slice(&uniform(&mut r, n, -0.5, 0.5));
        }
        let n_in = r.random_range(2..5);
        let x_in = random_batch(&mut r, n_in, 4, &[2, 3]);
        let n_bf = r.random_range(1..5);
        let x_bf = random_batch(&mut r, n_bf, 4, &[0, 1, 2, 3]);
        let mut buffer = ReplayBuffer::new(16, 4, r.random());
        buffer.reservoir_update(&random_batch(&mut r, 8, 4, &[0, 1, 2, 3]));
        let all = x_in.concat(&x_bf).concat(buffer.contents());
        let min_norm = (0..all.len())
            .map(|i| ref_features(&model, all.input(i)).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        if min_relu_margin(&model, &all) < 1e-3 || min_norm < 1e-2 {
            continue;
        }
        let observed = vec![true; SMALL_CLASSES];
        let sets = ClassIndexSets::derive(SMALL_CLASSES, &x_in.labels, &observed);
        return Instance {
            model,
            x_in,
            x_bf,
            sets,
            buffer,
        };
    }
}

pub fn aml_config(method: Method, policy: NegativePolicy) -> LossConfig {
    let mut cfg = LossConfig::new(method).with_policy(policy);
    cfg.gamma = 0.7;
    cfg
}

/// ER-AML loss on an instance with a fixed pos/neg draw.
pub fn aml_loss(tape: &mut Tape, b: &BoundModel, inst: &Instance, cfg: &LossConfig, draw_seed: u64) -> Var {
    let plan = inst
        .buffer
        .fetch_pos_neg(&inst.x_in, cfg.negative_policy, &mut rng(draw_seed));
    let extra = inst.buffer.gather(&plan.extra_slots);
    losses::er_aml_loss(tape, b, &inst.x_in, &inst.x_bf, &plan, &extra, cfg)
        .unwrap()
        .loss
}

// ---- plain-loop transcriptions ----

pub fn ref_dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>())
        .collect()
}

pub fn ref_features(model: &ModelParams, x: &[f64]) -> Vec<f64> {
    let layers = &model.extractor.layers;
    let mut h = x.to_vec();
    for (k, l) in layers.iter().enumerate() {
        h = ref_dense(&h, l.weight.data(), l.bias.data());
        if k + 1 < layers.len() {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

pub fn ref_unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
    v.iter().map(|a| a / n).collect()
}

pub fn ref_cos(a: &[f64], b: &[f64]) -> f64 {
    ref_unit(a).iter().zip(ref_unit(b)).map(|(x, y)| x * y).sum()
}

pub fn ref_logits(model: &ModelParams, x: &[f64]) -> Vec<f64> {
    let f = ref_features(model, x);
    let p = &model.head.prototypes;
    (0..p.rows()).map(|c| ref_cos(&f, p.row(c)) / model.head.tau).collect()
}

/// `−log softmax_C(z)[y]` written the textbook way.
pub fn ref_ce(z: &[f64], y: usize, classes: &[bool]) -> f64 {
    let denom: f64 = z
        .iter()
        .zip(classes)
        .filter(|(_, &k)| k)
        .map(|(v, _)| v.exp())
        .sum();
    -(z[y].exp() / denom).ln()
}

pub fn ref_batch_ce(model: &ModelParams, batch: &LabeledBatch, classes: &[bool]) -> f64 {
    (0..batch.len())
        .map(|i| ref_ce(&ref_logits(model, batch.input(i)), batch.labels[i], classes))
        .sum()
}

pub fn ref_er(model: &ModelParams, x_in: &LabeledBatch, x_bf: &LabeledBatch) -> f64 {
    let all = vec![true; model.num_classes()];
    ref_batch_ce(model, x_in, &all) + ref_batch_ce(model, x_bf, &all)
}

pub fn ref_er_ace(model: &ModelParams, x_in: &LabeledBatch, x_bf: &LabeledBatch, sets: &ClassIndexSets) -> f64 {
    let old_or_curr: Vec<bool> = sets.curr.iter().zip(&sets.old).map(|(a, b)| *a || *b).collect();
    ref_batch_ce(model, x_in, &sets.curr) + ref_batch_ce(model, x_bf, &old_or_curr)
}

pub fn ref_ssil(model: &ModelParams, x_in: &LabeledBatch, x_bf: &LabeledBatch, sets: &ClassIndexSets, tasks: &[usize]) -> f64 {
    let mut total = ref_batch_ce(model, x_in, &sets.curr);
    for i in 0..x_bf.len() {
        let t = tasks[x_bf.labels[i]];
        let mask: Vec<bool> = tasks.iter().map(|&u| u == t).collect();
        total += ref_ce(&ref_logits(model, x_bf.input(i)), x_bf.labels[i], &mask);
    }
    total
}

/// Eq. 1 for explicit feature rows: per anchor,
/// `−(1/|P|) Σ_p log[exp(cos(a,p)/τ) / Σ_{n∈N∪P} exp(cos(a,n)/τ)]`, summed over anchors.
pub fn ref_supcon(anchors: &[Vec<f64>], candidates: &[Vec<f64>], sets: &[AnchorSets], tau: f64) -> f64 {
    sets.iter()
        .map(|s| {
            let a = &anchors[s.anchor];
            let sim = |j: usize| (ref_cos(a, &candidates[j]) / tau).exp();
            let denom: f64 = s.positives.iter().chain(&s.negatives).map(|&j| sim(j)).sum();
            -s.positives.iter().map(|&p| (sim(p) / denom).ln()).sum::<f64>() / s.positives.len() as f64
        })
        .sum()
}

pub fn ref_triplet(anchors: &[Vec<f64>], candidates: &[Vec<f64>], sets: &[AnchorSets], margin: f64) -> f64 {
    let dist = |a: &[f64], b: &[f64]| {
        ref_unit(a)
            .iter()
            .zip(ref_unit(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
    };
    sets.iter()
        .map(|s| {
            let a = &anchors[s.anchor];
            let mut total = 0.0;
            for &p in &s.positives {
                for &n in &s.negatives {
                    total += (dist(a, &candidates[p]) - dist(a, &candidates[n]) + margin).max(0.0);
                }
            }
            total
        })
        .sum()
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub mod gradcheck;
