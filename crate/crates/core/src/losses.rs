//! Incoming and replay losses, and the per-method compositions.
//!
//! All cross-entropy terms are sums over samples. Every class restriction is
//! realised by excluding classes from the softmax denominator, so logits of
//! excluded classes never influence a value or a gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::batch::LabeledBatch;
use crate::buffer::{PosNegPlan, Source};
use crate::error::{Error, Result};
use crate::network::BoundModel;
use crate::tensor::{Tape, Tensor, Var, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Er,
    ErAce,
    ErAml,
    ErAmlTriplet,
    SsilNodistill,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Er,
        Method::ErAce,
        Method::ErAml,
        Method::ErAmlTriplet,
        Method::SsilNodistill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Er => "er",
            Method::ErAce => "er-ace",
            Method::ErAml => "er-aml",
            Method::ErAmlTriplet => "er-aml-triplet",
            Method::SsilNodistill => "ssil-nodistill",
        }
    }

    pub fn is_metric(self) -> bool {
        matches!(self, Method::ErAml | Method::ErAmlTriplet)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("method: unknown value `{s}`")))
    }
}

/// Which classes may supply negatives for the incoming metric loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NegativePolicy {
    #[default]
    IncomingOnly,
    AllClasses,
}

impl std::str::FromStr for NegativePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "incoming-only" => Ok(NegativePolicy::IncomingOnly),
            "all-classes" => Ok(NegativePolicy::AllClasses),
            _ => Err(Error::Config(format!("negative_policy: unknown value `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub method: Method,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Temperature of the incoming metric loss; `None` shares the head's τ.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub negative_policy: NegativePolicy,
    #[serde(default = "default_margin")]
    pub triplet_margin: f64,
}

fn default_gamma() -> f64 {
    1.0
}

fn default_margin() -> f64 {
    0.2
}

impl LossConfig {
    pub fn new(method: Method) -> Self {
        LossConfig {
            method,
            gamma: default_gamma(),
            tau: None,
            negative_policy: NegativePolicy::default(),
            triplet_margin: default_margin(),
        }
    }

    pub fn with_policy(mut self, policy: NegativePolicy) -> Self {
        self.negative_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma: must be finite and ≥ 0, got {}", self.gamma)));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("tau: must be positive, got {t}")));
            }
        }
        if !(self.triplet_margin > 0.0 && self.triplet_margin.is_finite()) {
            return Err(Error::Config(format!(
                "triplet_margin: must be positive, got {}",
                self.triplet_margin
            )));
        }
        Ok(())
    }
}

/// Class-membership masks over the fixed universe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIndexSets {
    /// Classes present in the incoming batch.
    pub curr: Vec<bool>,
    /// Observed so far, minus `curr`.
    pub old: Vec<bool>,
}

impl ClassIndexSets {
    /// Derives the sets from the incoming labels and the observation history.
    pub fn derive(num_classes: usize, incoming: &[usize], observed: &[bool]) -> Self {
        let mut curr = vec![false; num_classes];
        for &y in incoming {
            curr[y] = true;
        }
        let old = (0..num_classes).map(|c| observed[c] && !curr[c]).collect();
        ClassIndexSets { curr, old }
    }

    pub fn num_classes(&self) -> usize {
        self.curr.len()
    }

    pub fn all(&self) -> Vec<bool> {
        vec![true; self.num_classes()]
    }

    pub fn old_or_curr(&self) -> Vec<bool> {
        self.curr.iter().zip(&self.old).map(|(a, b)| *a || *b).collect()
    }
}

/// Logits together with their targets.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    pub logits: Var,
    pub targets: Vec<usize>,
}

impl PredictionBatch {
    /// Softmax over the admissible classes; excluded classes get probability 0.
    pub fn softmax(&self, tape: &Tape, classes: &[bool]) -> Vec<Vec<f64>> {
        let z = tape.value(self.logits);
        (0..z.rows())
            .map(|i| {
                let row = z.row(i);
                let max = row
                    .iter()
                    .zip(classes)
                    .filter(|(_, &k)| k)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row
                    .iter()
                    .zip(classes)
                    .map(|(&v, &k)| if k { (v - max).exp() } else { 0.0 })
                    .collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }

    pub fn masked_ce(&self, tape: &mut Tape, classes: &[bool]) -> Result<Var> {
        masked_ce(tape, self.logits, &self.targets, classes)
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// `−Σ_x log softmax_C(z_x)[y_x]`, with the softmax restricted to `classes`.
pub fn masked_ce(tape: &mut Tape, logits: Var, targets: &[usize], classes: &[bool]) -> Result<Var> {
    if targets.is_empty() {
        return Ok(zero(tape));
    }
    if !classes.iter().any(|&k| k) {
        return Err(Error::Contract("masked_ce: admissible class set is empty".into()));
    }
    if let Some(&y) = targets.iter().find(|&&y| !classes.get(y).copied().unwrap_or(false)) {
        return Err(Error::Contract(format!("masked_ce: target {y} outside the admissible set")));
    }
    let lse = tape.log_sum_exp(logits, classes)?;
    let picked = tape.pick(logits, targets)?;
    let per = tape.sub(lse, picked)?;
    Ok(tape.sum(per))
}

/// Positive and negative candidate rows for one anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSets {
    pub anchor: usize,
    /// Candidate row holding the anchor itself, if the anchor is also a candidate.
    pub self_row: Option<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

fn check_sets(sets: &[AnchorSets]) -> Result<()> {
    for s in sets {
        if s.positives.is_empty() {
            return Err(Error::Contract(format!("anchor {} has no positive", s.anchor)));
        }
        if let Some(me) = s.self_row {
            if s.positives.contains(&me) || s.negatives.contains(&me) {
                return Err(Error::Contract(format!("anchor {} appears in its own sets", s.anchor)));
            }
        }
    }
    Ok(())
}

/// Supervised contrastive loss on feature rows.
///
/// For each anchor `i` with positives `P` and negatives `N` (rows of
/// `candidates`), adds `−(1/|P|) Σ_p log[sim(p,i) / Σ_{n∈N∪P} sim(n,i)]` with
/// `sim(a,b) = exp(cos(a,b)/τ)`. The anchor is never part of its own
/// denominator.
pub fn supcon_loss(tape: &mut Tape, anchors: Var, candidates: Var, sets: &[AnchorSets], tau: f64) -> Result<Var> {
    check_sets(sets)?;
    if sets.is_empty() {
        return Ok(zero(tape));
    }
    let m = tape.value(candidates).rows();
    let rows: Vec<usize> = sets.iter().map(|s| s.anchor).collect();
    let a = tape.gather_rows(anchors, &rows)?;
    let an = tape.l2_normalize(a, NORM_EPS)?;
    let cn = tape.l2_normalize(candidates, NORM_EPS)?;
    let ct = tape.transpose(cn)?;
    let cos = tape.matmul(an, ct)?;
    let s = tape.scale(cos, 1.0 / tau);

    let n = sets.len();
    let mut mask = vec![false; n * m];
    let mut weights = vec![0.0; n * m];
    for (i, set) in sets.iter().enumerate() {
        for &j in set.positives.iter().chain(&set.negatives) {
            mask[i * m + j] = true;
        }
        let w = 1.0 / set.positives.len() as f64;
        for &p in &set.positives {
            weights[i * m + p] += w;
        }
    }
    let lse = tape.log_sum_exp_rows(s, mask)?;
    let total_lse = tape.sum(lse);
    let wv = tape.constant(Tensor::new(vec![n, m], weights)?);
    let weighted = tape.mul(s, wv)?;
    let pos = tape.sum(weighted);
    Ok(tape.sub(total_lse, pos)?)
}

/// `Σ_i max(0, ‖a_i − p_i‖² − ‖a_i − n_i‖² + margin)` on l2-normalised rows,
/// with exactly one positive and one negative per anchor.
pub fn triplet_loss(tape: &mut Tape, anchors: Var, candidates: Var, sets: &[AnchorSets], margin: f64) -> Result<Var> {
    check_sets(sets)?;
    let usable: Vec<&AnchorSets> = sets.iter().filter(|s| !s.negatives.is_empty()).collect();
    if usable.is_empty() {
        return Ok(zero(tape));
    }
    if usable.iter().any(|s| s.positives.len() != 1 || s.negatives.len() != 1) {
        return Err(Error::Contract("triplet_loss needs one positive and one negative per anchor".into()));
    }
    let ai: Vec<usize> = usable.iter().map(|s| s.anchor).collect();
    let pi: Vec<usize> = usable.iter().map(|s| s.positives[0]).collect();
    let ni: Vec<usize> = usable.iter().map(|s| s.negatives[0]).collect();
    let an = tape.l2_normalize(anchors, NORM_EPS)?;
    let cn = tape.l2_normalize(candidates, NORM_EPS)?;
    let a = tape.gather_rows(an, &ai)?;
    let p = tape.gather_rows(cn, &pi)?;
    let n = tape.gather_rows(cn, &ni)?;
    let dp = tape.sub(a, p)?;
    let dp2 = tape.mul(dp, dp)?;
    let dpos = tape.sum_rows(dp2)?;
    let dn = tape.sub(a, n)?;
    let dn2 = tape.mul(dn, dn)?;
    let dneg = tape.sum_rows(dn2)?;
    let gap = tape.sub(dpos, dneg)?;
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.sum(hinge))
}

/// Rows of the joint forward pass, in order: incoming, fetched buffer
/// positives/negatives, replay batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowLayout {
    pub incoming: usize,
    pub extra: usize,
    pub replay: usize,
    /// Labels of every row, in layout order.
    pub labels: Vec<usize>,
    /// Buffer slot behind each extra row.
    pub extra_slots: Vec<usize>,
}

impl RowLayout {
    pub fn total(&self) -> usize {
        self.incoming + self.extra + self.replay
    }

    pub fn replay_rows(&self) -> std::ops::Range<usize> {
        self.incoming + self.extra..self.total()
    }

    pub fn extra_rows(&self) -> std::ops::Range<usize> {
        self.incoming..self.incoming + self.extra
    }
}

/// Result of building one step's loss graph.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: Var,
    /// Features of every forwarded row (see `layout`).
    pub features: Var,
    pub layout: RowLayout,
    /// Anchors dropped for lack of a positive (metric methods only).
    pub skipped_anchors: usize,
}

struct Forward {
    features: Var,
    logits: Var,
    layout: RowLayout,
}

fn forward(
    tape: &mut Tape,
    model: &BoundModel,
    x_in: &LabeledBatch,
    extra: &LabeledBatch,
    extra_slots: Vec<usize>,
    x_bf: &LabeledBatch,
) -> Result<Forward> {
    let joint = x_in.concat(extra).concat(x_bf);
    let layout = RowLayout {
        incoming: x_in.len(),
        extra: extra.len(),
        replay: x_bf.len(),
        labels: joint.labels.clone(),
        extra_slots,
    };
    let x = model.input(tape, &joint)?;
    let features = model.features(tape, x)?;
    let logits = model.cosine_logits(tape, features)?;
    Ok(Forward {
        features,
        logits,
        layout,
    })
}

fn rows_ce(tape: &mut Tape, logits: Var, labels: &[usize], rows: &[usize], classes: &[bool]) -> Result<Var> {
    if rows.is_empty() {
        return Ok(zero(tape));
    }
    let z = tape.gather_rows(logits, rows)?;
    let targets: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    masked_ce(tape, z, &targets, classes)
}

/// Plain replay: one cross-entropy over the union and the whole universe.
pub fn er_loss(tape: &mut Tape, model: &BoundModel, x_in: &LabeledBatch, x_bf: &LabeledBatch) -> Result<LossOutput> {
    let fw = forward(tape, model, x_in, &LabeledBatch::empty(x_in.dim), vec![], x_bf)?;
    let all = vec![true; tape.value(fw.logits).cols()];
    let rows: Vec<usize> = (0..fw.layout.total()).collect();
    let loss = rows_ce(tape, fw.logits, &fw.layout.labels, &rows, &all)?;
    Ok(LossOutput {
        loss,
        features: fw.features,
        layout: fw.layout,
        skipped_anchors: 0,
    })
}

/// Asymmetric cross-entropy: replay over `C_old ∪ C_curr`, incoming over `C_curr`.
pub fn er_ace_loss(
    tape: &mut Tape,
    model: &BoundModel,
    x_in: &LabeledBatch,
    x_bf: &LabeledBatch,
    sets: &ClassIndexSets,
) -> Result<LossOutput> {
    let fw = forward(tape, model, x_in, &LabeledBatch::empty(x_in.dim), vec![], x_bf)?;
    let incoming: Vec<usize> = (0..fw.layout.incoming).collect();
    let replay: Vec<usize> = fw.layout.replay_rows().collect();
    let l_bf = rows_ce(tape, fw.logits, &fw.layout.labels, &replay, &sets.old_or_curr())?;
    let l_in = rows_ce(tape, fw.logits, &fw.layout.labels, &incoming, &sets.curr)?;
    let loss = tape.add(l_bf, l_in)?;
    Ok(LossOutput {
        loss,
        features: fw.features,
        layout: fw.layout,
        skipped_anchors: 0,
    })
}

/// Masked incoming loss plus a replay loss masked per task of origin.
/// `task_of_class` maps each class to the task that introduced it.
pub fn ssil_nodistill_loss(
    tape: &mut Tape,
    model: &BoundModel,
    x_in: &LabeledBatch,
    x_bf: &LabeledBatch,
    sets: &ClassIndexSets,
    task_of_class: &[usize],
) -> Result<LossOutput> {
    let fw = forward(tape, model, x_in, &LabeledBatch::empty(x_in.dim), vec![], x_bf)?;
    let incoming: Vec<usize> = (0..fw.layout.incoming).collect();
    let mut loss = rows_ce(tape, fw.logits, &fw.layout.labels, &incoming, &sets.curr)?;
    let mut by_task: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for r in fw.layout.replay_rows() {
        by_task.entry(task_of_class[fw.layout.labels[r]]).or_default().push(r);
    }
    for (task, rows) in by_task {
        let classes: Vec<bool> = task_of_class.iter().map(|&t| t == task).collect();
        let term = rows_ce(tape, fw.logits, &fw.layout.labels, &rows, &classes)?;
        loss = tape.add(loss, term)?;
    }
    Ok(LossOutput {
        loss,
        features: fw.features,
        layout: fw.layout,
        skipped_anchors: 0,
    })
}

/// `γ·L1(incoming) + L2(replay)`: a metric loss on the incoming batch using
/// the fetched positives/negatives, and prototype cross-entropy over the
/// universe on the replay batch.
pub fn er_aml_loss(
    tape: &mut Tape,
    model: &BoundModel,
    x_in: &LabeledBatch,
    x_bf: &LabeledBatch,
    plan: &PosNegPlan,
    extra: &LabeledBatch,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let fw = forward(tape, model, x_in, extra, plan.extra_slots.clone(), x_bf)?;
    let n_in = fw.layout.incoming;
    let row_of = |s: Source| match s {
        Source::Incoming(i) => i,
        Source::Buffer(slot) => n_in + plan.extra_row(slot).expect("slot fetched"),
    };
    let sets: Vec<AnchorSets> = plan
        .pairs
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            p.as_ref().map(|pair| AnchorSets {
                anchor: i,
                self_row: Some(i),
                positives: vec![row_of(pair.positive)],
                negatives: vec![row_of(pair.negative)],
            })
        })
        .collect();
    let tau = cfg.tau.unwrap_or(model.tau());
    let l1 = match cfg.method {
        Method::ErAmlTriplet => triplet_loss(tape, fw.features, fw.features, &sets, cfg.triplet_margin)?,
        _ => supcon_loss(tape, fw.features, fw.features, &sets, tau)?,
    };
    let l1 = tape.scale(l1, cfg.gamma);
    let replay: Vec<usize> = fw.layout.replay_rows().collect();
    let all = vec![true; tape.value(fw.logits).cols()];
    let l2 = rows_ce(tape, fw.logits, &fw.layout.labels, &replay, &all)?;
    let loss = tape.add(l1, l2)?;
    Ok(LossOutput {
        loss,
        features: fw.features,
        layout: fw.layout,
        skipped_anchors: plan.skipped(),
    })
}
