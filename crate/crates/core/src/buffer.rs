//! Fixed-capacity reservoir replay memory.

use std::io::{Read, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::LabeledBatch;
use crate::error::Result;
use crate::io::ByteReader;
use crate::losses::NegativePolicy;

const DUMP_MAGIC: &[u8; 8] = b"ASRPBUFR";
const DUMP_VERSION: u32 = 1;

/// Reservoir-sampled memory of labelled examples (Vitter's Algorithm R).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    slots: LabeledBatch,
    n_seen: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for ReplayBuffer {
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity && self.slots == other.slots && self.n_seen == other.n_seen
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize, seed: u64) -> Self {
        ReplayBuffer {
            capacity,
            slots: LabeledBatch::empty(dim),
            n_seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn dim(&self) -> usize {
        self.slots.dim
    }

    /// Current contents as a batch (slot order).
    pub fn contents(&self) -> &LabeledBatch {
        &self.slots
    }

    pub fn label(&self, slot: usize) -> usize {
        self.slots.labels[slot]
    }

    /// Offers every example of `batch` in order.
    pub fn reservoir_update(&mut self, batch: &LabeledBatch) {
        for i in 0..batch.len() {
            self.offer(batch.input(i), batch.labels[i]);
        }
    }

    fn offer(&mut self, input: &[f64], label: usize) {
        if self.slots.len() < self.capacity {
            self.slots.push(input, label);
        } else if self.capacity > 0 {
            let j = self.rng.random_range(0..=self.n_seen);
            if (j as usize) < self.capacity {
                let j = j as usize;
                let d = self.slots.dim;
                self.slots.inputs[j * d..(j + 1) * d].copy_from_slice(input);
                self.slots.labels[j] = label;
            }
        }
        self.n_seen += 1;
    }

    /// Slot indices of a `k`-sample draw: with replacement when the buffer
    /// holds fewer than `k` items, without replacement otherwise.
    pub fn sample_slots<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        let n = self.len();
        if n == 0 || k == 0 {
            return Vec::new();
        }
        if n < k {
            (0..k).map(|_| rng.random_range(0..n)).collect()
        } else {
            index::sample(rng, n, k).into_vec()
        }
    }

    /// Replay batch; empty when the buffer is empty.
    pub fn sample<R: Rng>(&self, k: usize, rng: &mut R) -> LabeledBatch {
        self.slots.select(&self.sample_slots(k, rng))
    }

    /// Chooses one positive and one negative per incoming anchor.
    ///
    /// Positives come from the incoming batch (excluding the anchor) when a
    /// same-class partner exists there, otherwise from the buffer. Under
    /// [`NegativePolicy::IncomingOnly`] negatives must belong to a class of the
    /// incoming batch other than the anchor's, preferring incoming items; under
    /// [`NegativePolicy::AllClasses`] any other-class item of the incoming
    /// batch or buffer is drawn uniformly. Anchors lacking either side are
    /// skipped.
    pub fn fetch_pos_neg<R: Rng>(&self, x_in: &LabeledBatch, policy: NegativePolicy, rng: &mut R) -> PosNegPlan {
        let mut in_batch = vec![false; self.slots.labels.iter().chain(&x_in.labels).max().map_or(0, |m| m + 1)];
        for &y in &x_in.labels {
            in_batch[y] = true;
        }
        let mut plan = PosNegPlan::default();
        for (i, &y) in x_in.labels.iter().enumerate() {
            let pos_in: Vec<usize> = (0..x_in.len()).filter(|&j| j != i && x_in.labels[j] == y).collect();
            let positive = if !pos_in.is_empty() {
                Some(Source::Incoming(pos_in[rng.random_range(0..pos_in.len())]))
            } else {
                let pos_bf: Vec<usize> = (0..self.len()).filter(|&s| self.label(s) == y).collect();
                (!pos_bf.is_empty()).then(|| Source::Buffer(pos_bf[rng.random_range(0..pos_bf.len())]))
            };
            let neg_in: Vec<usize> = (0..x_in.len()).filter(|&j| x_in.labels[j] != y).collect();
            let negative = match policy {
                NegativePolicy::IncomingOnly => {
                    if !neg_in.is_empty() {
                        Some(Source::Incoming(neg_in[rng.random_range(0..neg_in.len())]))
                    } else {
                        let neg_bf: Vec<usize> = (0..self.len())
                            .filter(|&s| self.label(s) != y && in_batch[self.label(s)])
                            .collect();
                        (!neg_bf.is_empty()).then(|| Source::Buffer(neg_bf[rng.random_range(0..neg_bf.len())]))
                    }
                }
                NegativePolicy::AllClasses => {
                    let neg_bf: Vec<usize> = (0..self.len()).filter(|&s| self.label(s) != y).collect();
                    let total = neg_in.len() + neg_bf.len();
                    (total > 0).then(|| {
                        let k = rng.random_range(0..total);
                        if k < neg_in.len() {
                            Source::Incoming(neg_in[k])
                        } else {
                            Source::Buffer(neg_bf[k - neg_in.len()])
                        }
                    })
                }
            };
            match (positive, negative) {
                (Some(positive), Some(negative)) => {
                    for s in [positive, negative] {
                        if let Source::Buffer(slot) = s {
                            if !plan.extra_slots.contains(&slot) {
                                plan.extra_slots.push(slot);
                            }
                        }
                    }
                    plan.pairs.push(Some(PosNeg { positive, negative }));
                }
                _ => plan.pairs.push(None),
            }
        }
        plan
    }

    /// Buffer items whose slots are listed, as a batch.
    pub fn gather(&self, slots: &[usize]) -> LabeledBatch {
        self.slots.select(slots)
    }

    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&self.n_seen.to_le_bytes())?;
        for i in 0..self.len() {
            w.write_all(&(self.label(i) as u32).to_le_bytes())?;
            for &v in self.slots.input(i) {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a dump back as `(contents, n_seen)`.
    pub fn read_dump<R: Read>(mut r: R) -> Result<(LabeledBatch, u64)> {
        let mut rd = ByteReader::new(&mut r);
        if rd.bytes(8)? != DUMP_MAGIC {
            return Err(rd.error("bad buffer dump magic"));
        }
        let version = rd.u32()?;
        if version != DUMP_VERSION {
            return Err(rd.error(&format!("unsupported buffer dump version {version}")));
        }
        let dim = rd.u32()? as usize;
        let count = rd.u32()? as usize;
        let n_seen = rd.u64()?;
        let mut out = LabeledBatch::empty(dim);
        let mut row = vec![0.0; dim];
        for _ in 0..count {
            let label = rd.u32()? as usize;
            for v in row.iter_mut() {
                *v = rd.f32()? as f64;
            }
            out.push(&row, label);
        }
        Ok((out, n_seen))
    }
}

/// Where a positive or negative lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Incoming(usize),
    Buffer(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PosNeg {
    pub positive: Source,
    pub negative: Source,
}

/// Output of [`ReplayBuffer::fetch_pos_neg`]: one entry per anchor (`None`
/// means skipped) plus the distinct buffer slots that need a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PosNegPlan {
    pub pairs: Vec<Option<PosNeg>>,
    pub extra_slots: Vec<usize>,
}

impl PosNegPlan {
    pub fn skipped(&self) -> usize {
        self.pairs.iter().filter(|p| p.is_none()).count()
    }

    pub fn extra_row(&self, slot: usize) -> Option<usize> {
        self.extra_slots.iter().position(|&s| s == slot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(labels: &[usize]) -> LabeledBatch {
        let inputs = labels.iter().enumerate().map(|(i, _)| i as f64).collect();
        LabeledBatch::new(1, inputs, labels.to_vec())
    }

    #[test]
    fn fills_before_replacing() {
        let mut b = ReplayBuffer::new(5, 1, 0);
        b.reservoir_update(&batch(&[0, 1, 2, 3, 4]));
        assert_eq!(b.len(), 5);
        assert_eq!(b.contents().labels, vec![0, 1, 2, 3, 4]);
        b.reservoir_update(&batch(&[9; 50]));
        assert_eq!(b.len(), 5);
        assert_eq!(b.n_seen(), 55);
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let mut b = ReplayBuffer::new(0, 1, 0);
        b.reservoir_update(&batch(&[0, 1]));
        assert!(b.is_empty());
        assert_eq!(b.n_seen(), 2);
    }

    #[test]
    fn sampling_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ReplayBuffer::new(5, 1, 0);
        assert!(b.sample(10, &mut rng).is_empty());
        b.reservoir_update(&batch(&[3]));
        let s = b.sample(10, &mut rng);
        assert_eq!(s.labels, vec![3; 10]);
        b.reservoir_update(&batch(&[0, 1, 2, 4]));
        let mut slots = b.sample_slots(5, &mut rng);
        slots.sort();
        assert_eq!(slots, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn two_class_batch_needs_no_buffer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = ReplayBuffer::new(10, 1, 0);
        b.reservoir_update(&batch(&[0, 1, 0, 1]));
        let x = batch(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let plan = b.fetch_pos_neg(&x, NegativePolicy::IncomingOnly, &mut rng);
        assert_eq!(plan.skipped(), 0);
        assert!(plan.extra_slots.is_empty());
        for (i, p) in plan.pairs.iter().enumerate() {
            let p = p.unwrap();
            let Source::Incoming(j) = p.positive else { panic!() };
            assert!(j != i && x.labels[j] == x.labels[i]);
        }
    }

    #[test]
    fn distinct_incoming_classes_pull_positives_from_buffer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ReplayBuffer::new(10, 1, 0);
        b.reservoir_update(&batch(&[0, 1, 2]));
        let x = batch(&[0, 1, 2]);
        let plan = b.fetch_pos_neg(&x, NegativePolicy::IncomingOnly, &mut rng);
        for (i, p) in plan.pairs.iter().enumerate() {
            assert_eq!(p.unwrap().positive, Source::Buffer(i));
        }
        assert_eq!(plan.extra_slots.len(), 3);
    }

    #[test]
    fn single_class_batch_with_old_buffer_is_all_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = ReplayBuffer::new(10, 1, 0);
        b.reservoir_update(&batch(&[0, 0, 1, 1]));
        let x = batch(&[2, 2, 2]);
        let plan = b.fetch_pos_neg(&x, NegativePolicy::IncomingOnly, &mut rng);
        assert_eq!(plan.skipped(), 3);
        let plan = b.fetch_pos_neg(&x, NegativePolicy::AllClasses, &mut rng);
        assert_eq!(plan.skipped(), 0);
    }

    #[test]
    fn dump_round_trips() {
        let mut b = ReplayBuffer::new(3, 2, 0);
        b.reservoir_update(&LabeledBatch::new(2, vec![0.5, 1.0, -2.0, 0.25, 3.0, 4.0, 5.0, 6.0], vec![1, 0, 2, 2]));
        let mut out = Vec::new();
        b.write_dump(&mut out).unwrap();
        let (back, seen) = ReplayBuffer::read_dump(out.as_slice()).unwrap();
        assert_eq!(seen, 4);
        assert_eq!(&back, b.contents());
        assert!(ReplayBuffer::read_dump(&out[..10]).is_err());
    }
}
