//! Finite-difference suites: one entry per differentiable op and per
//! composite loss. Each suite draws a fresh random instance from its seed.

use asymreplay::losses::{self, AnchorSets, Method, NegativePolicy};
use asymreplay::tensor::{Tape, Var, NORM_EPS};
use rand::Rng;

use super::*;

pub type Suite = fn(u64) -> Result<(), String>;

pub const OPS: &[(&str, Suite)] = &[
    ("matmul", matmul),
    ("transpose", transpose),
    ("add_row_bias", add_row_bias),
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("scale", scale),
    ("add_scalar", add_scalar),
    ("relu", relu),
    ("l2_normalize", l2_normalize),
    ("log_sum_exp", log_sum_exp),
    ("log_sum_exp_rows", log_sum_exp_rows),
    ("pick", pick),
    ("gather_rows", gather_rows),
    ("concat_rows", concat_rows),
    ("sum_rows", sum_rows),
    ("sum", sum),
];

pub const LOSSES: &[(&str, Suite)] = &[
    ("supcon", supcon),
    ("prototype_ce", prototype_ce),
    ("masked_ce", masked_ce),
    ("er", er),
    ("er_ace", er_ace),
    ("er_aml_incoming", er_aml_incoming),
    ("er_aml_all", er_aml_all),
    ("triplet", triplet),
    ("er_aml_triplet", er_aml_triplet),
    ("ssil_nodistill", ssil_nodistill),
];

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.random_range(1..5), r.random_range(1..5))
}

/// A unary elementwise or shape op applied to one random matrix, reduced by a
/// random weighted sum.
fn unary(seed: u64, values: impl Fn(&mut ChaCha8Rng, usize) -> Vec<f64>, op: impl Fn(&mut Tape, Var) -> Var) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, m) = dims(&mut r);
    let x = values(&mut r, n * m);
    let w = uniform(&mut r, 64, -1.0, 1.0);
    check_leaves(&[vec![n, m]], &[x], |t, v| {
        let y = op(t, v[0]);
        let k = t.value(y).numel();
        weighted_sum(t, y, &w[..k])
    })
}

fn binary(seed: u64, op: impl Fn(&mut Tape, Var, Var) -> Var) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, m) = dims(&mut r);
    let a = uniform(&mut r, n * m, -2.0, 2.0);
    let b = uniform(&mut r, n * m, -2.0, 2.0);
    let w = uniform(&mut r, n * m, -1.0, 1.0);
    check_leaves(&[vec![n, m], vec![n, m]], &[a, b], |t, v| {
        let y = op(t, v[0], v[1]);
        weighted_sum(t, y, &w)
    })
}

fn plain(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    uniform(r, n, -2.0, 2.0)
}

pub fn matmul(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, k) = dims(&mut r);
    let m = r.random_range(1..5);
    let a = uniform(&mut r, n * k, -2.0, 2.0);
    let b = uniform(&mut r, k * m, -2.0, 2.0);
    let w = uniform(&mut r, n * m, -1.0, 1.0);
    check_leaves(&[vec![n, k], vec![k, m]], &[a, b], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, y, &w)
    })
}

pub fn transpose(seed: u64) -> Result<(), String> {
    unary(seed, plain, |t, x| t.transpose(x).unwrap())
}

pub fn add_row_bias(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, m) = dims(&mut r);
    let x = uniform(&mut r, n * m, -2.0, 2.0);
    let b = uniform(&mut r, m, -2.0, 2.0);
    let w = uniform(&mut r, n * m, -1.0, 1.0);
    check_leaves(&[vec![n, m], vec![m]], &[x, b], |t, v| {
        let y = t.add_row_bias(v[0], v[1]).unwrap();
        weighted_sum(t, y, &w)
    })
}

pub fn add(seed: u64) -> Result<(), String> {
    binary(seed, |t, a, b| t.add(a, b).unwrap())
}

pub fn sub(seed: u64) -> Result<(), String> {
    binary(seed, |t, a, b| t.sub(a, b).unwrap())
}

pub fn mul(seed: u64) -> Result<(), String> {
    binary(seed, |t, a, b| t.mul(a, b).unwrap())
}

pub fn scale(seed: u64) -> Result<(), String> {
    let c = rng(seed ^ 0x5eed).random_range(-3.0..3.0);
    unary(seed, plain, move |t, x| t.scale(x, c))
}

pub fn add_scalar(seed: u64) -> Result<(), String> {
    let c = rng(seed ^ 0x5eed).random_range(-3.0..3.0);
    unary(seed, plain, move |t, x| t.add_scalar(x, c))
}

pub fn relu(seed: u64) -> Result<(), String> {
    unary(seed, |r, n| away_from_zero(r, n, 1e-2), |t, x| t.relu(x))
}

pub fn l2_normalize(seed: u64) -> Result<(), String> {
    unary(seed, plain, |t, x| t.l2_normalize(x, NORM_EPS).unwrap())
}

pub fn log_sum_exp(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, m) = dims(&mut r);
    let mut mask: Vec<bool> = (0..m).map(|_| r.random_bool(0.6)).collect();
    mask[r.random_range(0..m)] = true;
    let x = uniform(&mut r, n * m, -3.0, 3.0);
    let w = uniform(&mut r, n, -1.0, 1.0);
    check_leaves(&[vec![n, m]], &[x], |t, v| {
        let y = t.log_sum_exp(v[0], &mask).unwrap();
        weighted_sum(t, y, &w)
    })
}

pub fn log_sum_exp_rows(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, m) = dims(&mut r);
    let mut mask: Vec<bool> = (0..n * m).map(|_| r.random_bool(0.6)).collect();
    for i in 0..n {
        mask[i * m + r.random_range(0..m)] = true;
    }
    let x = uniform(&mut r, n * m, -3.0, 3.0);
    let w = uniform(&mut r, n, -1.0, 1.0);
    check_leaves(&[vec![n, m]], &[x], |t, v| {
        let y = t.log_sum_exp_rows(v[0], mask.clone()).unwrap();
        weighted_sum(t, y, &w)
    })
}

pub fn pick(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, m) = dims(&mut r);
    let cols: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
    let x = uniform(&mut r, n * m, -2.0, 2.0);
    let w = uniform(&mut r, n, -1.0, 1.0);
    check_leaves(&[vec![n, m]], &[x], |t, v| {
        let y = t.pick(v[0], &cols).unwrap();
        weighted_sum(t, y, &w)
    })
}

pub fn gather_rows(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, m) = dims(&mut r);
    let k = r.random_range(1..6);
    let rows: Vec<usize> = (0..k).map(|_| r.random_range(0..n)).collect();
    let x = uniform(&mut r, n * m, -2.0, 2.0);
    let w = uniform(&mut r, k * m, -1.0, 1.0);
    check_leaves(&[vec![n, m]], &[x], |t, v| {
        let y = t.gather_rows(v[0], &rows).unwrap();
        weighted_sum(t, y, &w)
    })
}

pub fn concat_rows(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let m = r.random_range(1..5);
    let (n1, n2) = (r.random_range(1..4), r.random_range(1..4));
    let a = uniform(&mut r, n1 * m, -2.0, 2.0);
    let b = uniform(&mut r, n2 * m, -2.0, 2.0);
    let w = uniform(&mut r, (n1 + n2) * m, -1.0, 1.0);
    check_leaves(&[vec![n1, m], vec![n2, m]], &[a, b], |t, v| {
        let y = t.concat_rows(&[v[0], v[1]]).unwrap();
        weighted_sum(t, y, &w)
    })
}

pub fn sum_rows(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, m) = dims(&mut r);
    let x = uniform(&mut r, n * m, -2.0, 2.0);
    let w = uniform(&mut r, n, -1.0, 1.0);
    check_leaves(&[vec![n, m]], &[x], |t, v| {
        let y = t.sum_rows(v[0]).unwrap();
        weighted_sum(t, y, &w)
    })
}

pub fn sum(seed: u64) -> Result<(), String> {
    unary(seed, plain, |t, x| {
        let s = t.sum(x);
        t.mul(s, s).unwrap()
    })
}

// ---- composite losses ----

fn random_anchor_sets(r: &mut ChaCha8Rng, anchors: usize, candidates: usize, one_each: bool) -> Vec<AnchorSets> {
    (0..anchors)
        .map(|a| {
            let mut pool: Vec<usize> = (0..candidates).filter(|&j| j != a).collect();
            for i in (1..pool.len()).rev() {
                pool.swap(i, r.random_range(0..=i));
            }
            let (np, nn) = if one_each {
                (1, 1)
            } else {
                let np = r.random_range(1..pool.len());
                (np, r.random_range(0..=pool.len() - np))
            };
            AnchorSets {
                anchor: a,
                self_row: Some(a),
                positives: pool[..np].to_vec(),
                negatives: pool[np..np + nn].to_vec(),
            }
        })
        .collect()
}

pub fn supcon(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, d) = (r.random_range(3..6), r.random_range(2..5));
    let tau = r.random_range(0.2..1.0);
    let k = r.random_range(1..n);
    let sets = random_anchor_sets(&mut r, k, n, false);
    let f = uniform(&mut r, n * d, -2.0, 2.0);
    check_leaves(&[vec![n, d]], &[f], |t, v| losses::supcon_loss(t, v[0], v[0], &sets, tau).unwrap())
}

pub fn triplet(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, d) = (r.random_range(3..6), r.random_range(2..5));
    let k = r.random_range(1..n);
    let sets = random_anchor_sets(&mut r, k, n, true);
    let f = uniform(&mut r, n * d, -2.0, 2.0);
    // Draw the margin so that no hinge sits within 1e-2 of its kink.
    let feats: Vec<Vec<f64>> = f.chunks(d).map(<[f64]>::to_vec).collect();
    let gaps: Vec<f64> = sets
        .iter()
        .map(|s| ref_triplet(&feats, &feats, std::slice::from_ref(s), 10.0) - 10.0)
        .collect();
    let margin = loop {
        let m = r.random_range(0.0..1.0);
        if gaps.iter().all(|g| (g + m).abs() > 1e-2) {
            break m;
        }
    };
    check_leaves(&[vec![n, d]], &[f], |t, v| losses::triplet_loss(t, v[0], v[0], &sets, margin).unwrap())
}

pub fn masked_ce(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, c) = (r.random_range(1..5), r.random_range(2..6));
    let mut classes: Vec<bool> = (0..c).map(|_| r.random_bool(0.6)).collect();
    classes[r.random_range(0..c)] = true;
    let admissible: Vec<usize> = (0..c).filter(|&k| classes[k]).collect();
    let targets: Vec<usize> = (0..n).map(|_| admissible[r.random_range(0..admissible.len())]).collect();
    let z = uniform(&mut r, n * c, -3.0, 3.0);
    check_leaves(&[vec![n, c]], &[z], |t, v| losses::masked_ce(t, v[0], &targets, &classes).unwrap())
}

pub fn prototype_ce(seed: u64) -> Result<(), String> {
    let inst = instance(seed);
    check_model_loss(&inst.model, |t, b| {
        let x = b.input(t, &inst.x_bf).unwrap();
        let f = b.features(t, x).unwrap();
        let z = b.cosine_logits(t, f).unwrap();
        losses::masked_ce(t, z, &inst.x_bf.labels, &[true; SMALL_CLASSES]).unwrap()
    })
}

pub fn er(seed: u64) -> Result<(), String> {
    let inst = instance(seed);
    check_model_loss(&inst.model, |t, b| losses::er_loss(t, b, &inst.x_in, &inst.x_bf).unwrap().loss)
}

pub fn er_ace(seed: u64) -> Result<(), String> {
    let inst = instance(seed);
    check_model_loss(&inst.model, |t, b| {
        losses::er_ace_loss(t, b, &inst.x_in, &inst.x_bf, &inst.sets).unwrap().loss
    })
}

pub fn ssil_nodistill(seed: u64) -> Result<(), String> {
    let inst = instance(seed);
    check_model_loss(&inst.model, |t, b| {
        losses::ssil_nodistill_loss(t, b, &inst.x_in, &inst.x_bf, &inst.sets, &SMALL_TASKS)
            .unwrap()
            .loss
    })
}

fn aml(seed: u64, method: Method, policy: NegativePolicy) -> Result<(), String> {
    let inst = instance(seed);
    let cfg = aml_config(method, policy);
    check_model_loss(&inst.model, |t, b| aml_loss(t, b, &inst, &cfg, seed))
}

pub fn er_aml_incoming(seed: u64) -> Result<(), String> {
    aml(seed, Method::ErAml, NegativePolicy::IncomingOnly)
}

pub fn er_aml_all(seed: u64) -> Result<(), String> {
    aml(seed, Method::ErAml, NegativePolicy::AllClasses)
}

pub fn er_aml_triplet(seed: u64) -> Result<(), String> {
    // A wide hinge margin keeps every triplet active, away from the kink.
    let inst = instance(seed);
    let mut cfg = aml_config(Method::ErAmlTriplet, NegativePolicy::IncomingOnly);
    cfg.triplet_margin = 5.0;
    check_model_loss(&inst.model, |t, b| aml_loss(t, b, &inst, &cfg, seed))
}

/// Runs `suite` on seeds `0..instances`, returning the first failure.
pub fn run(name: &str, suite: Suite, instances: u64) -> Result<(), String> {
    for seed in 0..instances {
        suite(seed).map_err(|e| format!("{name} seed {seed}: {e}"))?;
    }
    Ok(())
}
