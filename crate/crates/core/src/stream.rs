//! Datasets and the online streams built from them.
//!
//! Two stream shapes are supported: sharp task splits (classes grouped into
//! consecutive tasks, each sample emitted once) and a blurry stream where every
//! class has a Gaussian schedule over stream position and labels are drawn
//! categorically at every step.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::LabeledBatch;
use crate::error::{Error, Result};
use crate::io::ByteReader;

const DATASET_MAGIC: &[u8; 8] = b"ASRPDATA";
const DATASET_VERSION: u32 = 1;

/// Train / validation / test data over a fixed class universe.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub num_classes: usize,
    pub train: LabeledBatch,
    pub validation: LabeledBatch,
    pub test: LabeledBatch,
}

impl Dataset {
    pub fn train_counts(&self) -> Vec<usize> {
        class_counts(&self.train.labels, self.num_classes)
    }

    fn validate(&self) -> Result<()> {
        for split in [&self.train, &self.validation, &self.test] {
            if split.dim != self.input_dim {
                return Err(Error::Dimension("split width differs from input_dim".into()));
            }
            if let Some(&y) = split.labels.iter().find(|&&y| y >= self.num_classes) {
                return Err(Error::Config(format!("label {y} outside {} classes", self.num_classes)));
            }
        }
        Ok(())
    }

    /// Writes the versioned little-endian dataset file.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        for v in [
            self.input_dim,
            self.num_classes,
            self.train.len(),
            self.validation.len(),
            self.test.len(),
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for split in [&self.train, &self.validation, &self.test] {
            for i in 0..split.len() {
                w.write_all(&(split.labels[i] as u32).to_le_bytes())?;
                for &v in split.input(i) {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut rd = ByteReader::new(&mut r);
        if rd.bytes(8)? != DATASET_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "bad dataset magic".into(),
            });
        }
        let version = rd.u32()?;
        if version != DATASET_VERSION {
            return Err(rd.error(&format!("unsupported dataset version {version}")));
        }
        let input_dim = rd.u32()? as usize;
        let num_classes = rd.u32()? as usize;
        if input_dim == 0 || num_classes == 0 {
            return Err(rd.error("input_dim and num_classes must be positive"));
        }
        let counts = [rd.u32()? as usize, rd.u32()? as usize, rd.u32()? as usize];
        let mut splits = Vec::with_capacity(3);
        let mut row = vec![0.0; input_dim];
        for &n in &counts {
            let mut b = LabeledBatch::empty(input_dim);
            for _ in 0..n {
                let at = rd.offset();
                let label = rd.u32()? as usize;
                if label >= num_classes {
                    return Err(Error::Parse {
                        offset: at,
                        message: format!("label {label} outside {num_classes} classes"),
                    });
                }
                for v in row.iter_mut() {
                    *v = rd.f32()? as f64;
                }
                b.push(&row, label);
            }
            splits.push(b);
        }
        if !rd.at_end()? {
            return Err(rd.error("trailing bytes after declared payload"));
        }
        let test = splits.pop().unwrap();
        let validation = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Dataset {
            input_dim,
            num_classes,
            train,
            validation,
            test,
        })
    }
}

pub fn load_dataset(path: &std::path::Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    let ds = Dataset::load(std::io::BufReader::new(f))?;
    ds.validate()?;
    Ok(ds)
}

pub fn class_counts(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut c = vec![0; num_classes];
    for &y in labels {
        c[y] += 1;
    }
    c
}

/// Gaussian class clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Samples generated per class before splitting.
    pub samples_per_class: usize,
    /// Explicit class means; drawn from `N(0, mean_scale²)` per coordinate when absent.
    #[serde(default)]
    pub class_means: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_mean_scale")]
    pub mean_scale: f64,
    /// Isotropic noise standard deviation.
    pub noise: f64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_mean_scale() -> f64 {
    1.0
}

fn default_validation_fraction() -> f64 {
    0.05
}

fn default_test_fraction() -> f64 {
    0.2
}

impl SyntheticDatasetSpec {
    pub fn new(input_dim: usize, num_classes: usize, samples_per_class: usize, noise: f64) -> Self {
        SyntheticDatasetSpec {
            input_dim,
            num_classes,
            samples_per_class,
            class_means: None,
            mean_scale: default_mean_scale(),
            noise,
            validation_fraction: default_validation_fraction(),
            test_fraction: default_test_fraction(),
        }
    }

    /// The reference benchmark for comparing methods: 10 classes in 16
    /// dimensions (five tasks of two under the default stream), 500 samples
    /// per class, noise twice the class-mean scale.
    pub fn benchmark() -> Self {
        Self::new(16, 10, 500, 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("dataset: sizes must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("dataset.noise: must be ≥ 0, got {}", self.noise)));
        }
        let (v, t) = (self.validation_fraction, self.test_fraction);
        if !(0.0..1.0).contains(&v) || !(0.0..1.0).contains(&t) || v + t >= 1.0 {
            return Err(Error::Config("dataset: split fractions must leave a training share".into()));
        }
        if let Some(m) = &self.class_means {
            if m.len() != self.num_classes || m.iter().any(|r| r.len() != self.input_dim) {
                return Err(Error::Config("dataset.class_means: expected num_classes × input_dim".into()));
            }
            for i in 0..m.len() {
                for j in 0..i {
                    if m[i] == m[j] {
                        return Err(Error::Config(format!("dataset.class_means: classes {j} and {i} coincide")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-class `(train, validation, test)` sizes; they always sum to
    /// `samples_per_class`.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.samples_per_class;
        let val = (self.validation_fraction * n as f64).round() as usize;
        let test = (self.test_fraction * n as f64).round() as usize;
        (n - val - test, val, test)
    }
}

/// Draws a deterministic Gaussian-cluster dataset.
pub fn make_synthetic(spec: &SyntheticDatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = match &spec.class_means {
        Some(m) => m.clone(),
        None => {
            let normal = Normal::new(0.0, spec.mean_scale).map_err(|e| Error::Config(e.to_string()))?;
            (0..spec.num_classes)
                .map(|_| (0..spec.input_dim).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        }
    };
    let noise = Normal::new(0.0, 1.0).unwrap();
    let (n_train, n_val, _) = spec.split_sizes();
    let d = spec.input_dim;
    let mut train = LabeledBatch::empty(d);
    let mut validation = LabeledBatch::empty(d);
    let mut test = LabeledBatch::empty(d);
    let mut x = vec![0.0; d];
    for (c, mean) in means.iter().enumerate() {
        for k in 0..spec.samples_per_class {
            for (xi, mi) in x.iter_mut().zip(mean) {
                *xi = mi + spec.noise * noise.sample(&mut rng);
            }
            let dst = if k < n_train {
                &mut train
            } else if k < n_train + n_val {
                &mut validation
            } else {
                &mut test
            };
            dst.push(&x, c);
        }
    }
    Ok(Dataset {
        input_dim: d,
        num_classes: spec.num_classes,
        train,
        validation,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StreamMode {
    #[default]
    Split,
    Blurry,
}

impl std::str::FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(StreamMode::Split),
            "blurry" => Ok(StreamMode::Blurry),
            _ => Err(Error::Config(format!("mode: unknown value `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    #[serde(default = "default_classes_per_task")]
    pub classes_per_task: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub mode: StreamMode,
    /// Multiplier on the blurry schedule's standard deviation.
    #[serde(default = "default_blur")]
    pub blur: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes_per_task() -> usize {
    2
}

fn default_batch_size() -> usize {
    10
}

fn default_blur() -> f64 {
    1.0
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            classes_per_task: default_classes_per_task(),
            batch_size: default_batch_size(),
            mode: StreamMode::Split,
            blur: default_blur(),
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("stream.batch_size: must be ≥ 1".into()));
        }
        if self.classes_per_task == 0 || !num_classes.is_multiple_of(self.classes_per_task) {
            return Err(Error::Config(format!(
                "stream.classes_per_task: {} does not divide {num_classes} classes",
                self.classes_per_task
            )));
        }
        if !(self.blur > 0.0 && self.blur.is_finite()) {
            return Err(Error::Config(format!("stream.blur: must be positive, got {}", self.blur)));
        }
        Ok(())
    }

    pub fn num_tasks(&self, num_classes: usize) -> usize {
        num_classes / self.classes_per_task
    }
}

/// Class-to-task map and boundary steps, emitted beside the stream. The
/// learner never reads it; evaluation and the task-partitioned ablation do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMetadata {
    pub mode: StreamMode,
    pub task_of_class: Vec<usize>,
    /// First step of each task (nominal for blurry streams).
    pub task_starts: Vec<usize>,
    pub total_steps: usize,
    pub total_examples: usize,
}

impl StreamMetadata {
    pub fn num_tasks(&self) -> usize {
        self.task_starts.len()
    }

    /// Task active at `step` (by boundary position).
    pub fn task_at(&self, step: usize) -> usize {
        self.task_starts.iter().rposition(|&s| s <= step).unwrap_or(0)
    }

    pub fn classes_of_task(&self, task: usize) -> Vec<usize> {
        (0..self.task_of_class.len()).filter(|&c| self.task_of_class[c] == task).collect()
    }
}

fn metadata(ds: &Dataset, cfg: &StreamConfig, mode: StreamMode) -> StreamMetadata {
    let k = cfg.classes_per_task;
    let counts = ds.train_counts();
    let task_of_class: Vec<usize> = (0..ds.num_classes).map(|c| c / k).collect();
    let task_sizes: Vec<usize> = (0..cfg.num_tasks(ds.num_classes))
        .map(|t| counts[t * k..(t + 1) * k].iter().sum())
        .collect();
    let mut task_starts = Vec::new();
    let (mut seen, mut steps) = (0, 0);
    for n in task_sizes {
        match mode {
            // Split batches never straddle tasks, so each task starts a batch.
            StreamMode::Split => {
                task_starts.push(steps);
                steps += n.div_ceil(cfg.batch_size);
            }
            StreamMode::Blurry => task_starts.push(seen / cfg.batch_size),
        }
        seen += n;
    }
    let total_steps = match mode {
        StreamMode::Split => steps,
        StreamMode::Blurry => ds.train.len().div_ceil(cfg.batch_size),
    };
    StreamMetadata {
        mode,
        task_of_class,
        task_starts,
        total_steps,
        total_examples: ds.train.len(),
    }
}

/// Sharp task-split stream: tasks in ascending class order, samples shuffled
/// within each task, every training index emitted exactly once. A batch
/// never mixes two tasks; a task's last batch may be short.
#[derive(Debug, Clone)]
pub struct SplitStream<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    /// End offset in `order` of each task.
    task_ends: Vec<usize>,
    pos: usize,
    step: usize,
    batch_size: usize,
}

impl Iterator for SplitStream<'_> {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let task_end = *self.task_ends.iter().find(|&&e| e > self.pos).unwrap();
        let end = (self.pos + self.batch_size).min(task_end);
        let mut b = self.ds.train.select(&self.order[self.pos..end]);
        b.step = self.step;
        self.pos = end;
        self.step += 1;
        Some(b)
    }
}

pub fn split_stream<'a>(ds: &'a Dataset, cfg: &StreamConfig) -> Result<(SplitStream<'a>, StreamMetadata)> {
    cfg.validate(ds.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.classes_per_task;
    let mut order = Vec::with_capacity(ds.train.len());
    let mut task_ends = Vec::new();
    for t in 0..cfg.num_tasks(ds.num_classes) {
        let mut idx: Vec<usize> = (0..ds.train.len())
            .filter(|&i| ds.train.labels[i] / k == t)
            .collect();
        idx.shuffle(&mut rng);
        order.extend(idx);
        task_ends.push(order.len());
    }
    let meta = metadata(ds, cfg, StreamMode::Split);
    Ok((
        SplitStream {
            ds,
            order,
            task_ends,
            pos: 0,
            step: 0,
            batch_size: cfg.batch_size,
        },
        meta,
    ))
}

/// Per-class Gaussian schedule over stream position, in sample units.
///
/// Class `c` (0-based) is centred on the middle of its share of the stream,
/// `μ_c = (2(c+1) − 1)·N_c/2` for equal class sizes, with standard deviation
/// `blur · N_c/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurrySchedule {
    pub means: Vec<f64>,
    pub std: f64,
}

impl BlurrySchedule {
    pub fn new(counts: &[usize], blur: f64) -> Self {
        let mut start = 0.0;
        let means = counts
            .iter()
            .map(|&n| {
                let mu = start + n as f64 / 2.0;
                start += n as f64;
                mu
            })
            .collect();
        let mean_count = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
        BlurrySchedule {
            means,
            std: blur * mean_count / 2.0,
        }
    }

    pub fn variance(&self) -> f64 {
        self.std * self.std
    }

    /// Unnormalised log-weights of every class at stream position `pos`.
    pub fn log_weights(&self, pos: f64) -> Vec<f64> {
        let v = self.variance();
        self.means.iter().map(|&mu| -(mu - pos).powi(2) / (2.0 * v)).collect()
    }

    /// Normalised class probabilities at `pos`, restricted to `available`.
    pub fn probabilities(&self, pos: f64, available: &[bool]) -> Vec<f64> {
        let lw = self.log_weights(pos);
        let max = lw
            .iter()
            .zip(available)
            .filter(|(_, &a)| a)
            .map(|(&w, _)| w)
            .fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lw
            .iter()
            .zip(available)
            .map(|(&l, &a)| if a { (l - max).exp() } else { 0.0 })
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }
}

fn draw_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = c;
            if u < acc {
                return c;
            }
        }
    }
    last
}

/// Blurry-boundary stream.
#[derive(Debug, Clone)]
pub struct BlurryStream<'a> {
    ds: &'a Dataset,
    schedule: BlurrySchedule,
    pools: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
    step: usize,
    batch_size: usize,
}

impl BlurryStream<'_> {
    pub fn schedule(&self) -> &BlurrySchedule {
        &self.schedule
    }
}

impl Iterator for BlurryStream<'_> {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        let mut idx = Vec::with_capacity(self.batch_size);
        let pos = (self.step * self.batch_size) as f64 + self.batch_size as f64 / 2.0;
        for _ in 0..self.batch_size {
            let available: Vec<bool> = self.pools.iter().map(|p| !p.is_empty()).collect();
            if !available.iter().any(|&a| a) {
                break;
            }
            let probs = self.schedule.probabilities(pos, &available);
            let c = draw_categorical(&probs, &mut self.rng);
            idx.push(self.pools[c].pop().unwrap());
        }
        if idx.is_empty() {
            return None;
        }
        let mut b = self.ds.train.select(&idx);
        b.step = self.step;
        self.step += 1;
        Some(b)
    }
}

pub fn blurry_stream<'a>(ds: &'a Dataset, cfg: &StreamConfig) -> Result<(BlurryStream<'a>, StreamMetadata)> {
    cfg.validate(ds.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.train.labels.iter().enumerate() {
        pools[y].push(i);
    }
    for p in &mut pools {
        p.shuffle(&mut rng);
    }
    let schedule = BlurrySchedule::new(&ds.train_counts(), cfg.blur);
    let meta = metadata(ds, cfg, StreamMode::Blurry);
    Ok((
        BlurryStream {
            ds,
            schedule,
            pools,
            rng,
            step: 0,
            batch_size: cfg.batch_size,
        },
        meta,
    ))
}

/// Every batch of the configured stream, plus its metadata.
pub fn materialize(ds: &Dataset, cfg: &StreamConfig) -> Result<(Vec<LabeledBatch>, StreamMetadata)> {
    match cfg.mode {
        StreamMode::Split => {
            let (s, mut m) = split_stream(ds, cfg)?;
            let batches: Vec<_> = s.collect();
            m.total_steps = batches.len();
            Ok((batches, m))
        }
        StreamMode::Blurry => {
            let (s, mut m) = blurry_stream(ds, cfg)?;
            let batches: Vec<_> = s.collect();
            m.total_steps = batches.len();
            Ok((batches, m))
        }
    }
}

/// Mean number of distinct labels per batch.
pub fn mean_unique_labels(batches: &[LabeledBatch]) -> f64 {
    if batches.is_empty() {
        return 0.0;
    }
    let total: usize = batches
        .iter()
        .map(|b| {
            let mut l = b.labels.clone();
            l.sort_unstable();
            l.dedup();
            l.len()
        })
        .sum();
    total as f64 / batches.len() as f64
}

/// Label-only simulation of the blurry stream, used for calibration.
pub fn simulate_unique_labels(counts: &[usize], batch_size: usize, blur: f64, seed: u64) -> f64 {
    let schedule = BlurrySchedule::new(counts, blur);
    let mut pools = counts.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut step = 0;
    let mut total = 0usize;
    let mut seen = vec![usize::MAX; counts.len()];
    loop {
        let pos = (step * batch_size) as f64 + batch_size as f64 / 2.0;
        let mut drawn = 0;
        let mut unique = 0;
        for _ in 0..batch_size {
            let available: Vec<bool> = pools.iter().map(|&p| p > 0).collect();
            if !available.iter().any(|&a| a) {
                break;
            }
            let c = draw_categorical(&schedule.probabilities(pos, &available), &mut rng);
            pools[c] -= 1;
            drawn += 1;
            if seen[c] != step {
                seen[c] = step;
                unique += 1;
            }
        }
        if drawn == 0 {
            break;
        }
        total += unique;
        step += 1;
    }
    total as f64 / step.max(1) as f64
}

/// Number of Monte-Carlo streams averaged per calibration probe.
pub const CALIBRATION_TRIALS: u64 = 4;

/// Finds the blur factor whose stream averages `level` distinct labels per
/// batch, by bisection on `log(blur)` with common random numbers.
pub fn calibrate_blur(counts: &[usize], batch_size: usize, level: f64) -> Result<f64> {
    let max_level = counts.len().min(batch_size) as f64;
    if !(level >= 1.0 && level <= max_level) {
        return Err(Error::Config(format!(
            "blurriness level {level} outside [1, {max_level}]"
        )));
    }
    let probe = |blur: f64| {
        (0..CALIBRATION_TRIALS)
            .map(|s| simulate_unique_labels(counts, batch_size, blur, 0x5eed + s))
            .sum::<f64>()
            / CALIBRATION_TRIALS as f64
    };
    let (mut lo, mut hi) = (-12.0f64, 8.0f64);
    if probe(hi.exp()) < level {
        return Err(Error::Config(format!("blurriness level {level} is not reachable")));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if probe(mid.exp()) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Blurry stream whose schedule width is calibrated to `level` distinct
/// labels per batch.
pub fn blurriness_sweep<'a>(
    ds: &'a Dataset,
    cfg: &StreamConfig,
    level: f64,
) -> Result<(BlurryStream<'a>, StreamMetadata)> {
    let blur = calibrate_blur(&ds.train_counts(), cfg.batch_size, level)?;
    let cfg = StreamConfig {
        mode: StreamMode::Blurry,
        blur,
        ..cfg.clone()
    };
    blurry_stream(ds, &cfg)
}
