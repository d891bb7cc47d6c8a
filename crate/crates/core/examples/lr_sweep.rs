//! Learning-rate selection on the reference benchmark.
//!
//! Each method is trained with every candidate rate at several buffer sizes.
//! The rate with the best final validation accuracy, averaged over buffer
//! sizes and seeds, is reported per method. Validation data is the split
//! the generator withholds from training; datasets use seeds disjoint from
//! the acceptance suite.
//!
//!     cargo run --release --example lr_sweep [seeds] > results/lr_sweep.tsv

use asymreplay::losses::{LossConfig, Method, NegativePolicy};
use asymreplay::metrics;
use asymreplay::par::{self, Execution};
use asymreplay::stream::{self, make_synthetic, StreamConfig, SyntheticDatasetSpec};
use asymreplay::trainer::{self, RunState, TrainerConfig};

const RATES: [f64; 4] = [0.1, 0.05, 0.01, 0.001];
const BUFFERS: [usize; 3] = [20, 100, 500];
const DATASET_SEED_BASE: u64 = 2000;

fn variants() -> Vec<(&'static str, LossConfig)> {
    vec![
        ("er", LossConfig::new(Method::Er)),
        ("er-ace", LossConfig::new(Method::ErAce)),
        ("er-aml", LossConfig::new(Method::ErAml)),
        ("er-aml-all", LossConfig::new(Method::ErAml).with_policy(NegativePolicy::AllClasses)),
        ("ssil-nodistill", LossConfig::new(Method::SsilNodistill)),
    ]
}

fn validation_accuracy(loss: &LossConfig, lr: f64, buffer: usize, seed: u64) -> f64 {
    let ds = make_synthetic(&SyntheticDatasetSpec::benchmark(), DATASET_SEED_BASE + seed).unwrap();
    let sc = StreamConfig { seed, ..StreamConfig::default() };
    let mut cfg = TrainerConfig::new(loss.clone());
    cfg.lr = lr;
    cfg.buffer_size = buffer;
    cfg.seed = seed;
    cfg.track_drift = false;
    cfg.track_grad_norms = false;
    cfg.eval_every = usize::MAX;
    cfg.execution = Execution::Sequential;
    let (batches, meta) = stream::materialize(&ds, &sc).unwrap();
    let mut state = RunState::init(&ds, &cfg).unwrap();
    trainer::run_batches(&mut state, &batches, &meta, &ds, &cfg).unwrap();
    metrics::accuracy(&state.model, &ds.validation).unwrap()
}

fn main() {
    let seeds: u64 = std::env::args().nth(1).map_or(3, |s| s.parse().expect("seed count"));
    let variants = variants();
    let mut jobs = Vec::new();
    for v in 0..variants.len() {
        for &lr in &RATES {
            for &m in &BUFFERS {
                for seed in 0..seeds {
                    jobs.push((v, lr, m, seed));
                }
            }
        }
    }
    let accs = par::map(&jobs, Execution::Parallel, |&(v, lr, m, seed)| {
        validation_accuracy(&variants[v].1, lr, m, seed)
    });

    println!("method\tlr\tbuffer\tval_acc");
    type Job = (usize, f64, usize, u64);
    let mean = |pred: &dyn Fn(&Job) -> bool| {
        let xs: Vec<f64> = jobs.iter().zip(&accs).filter(|(j, _)| pred(j)).map(|(_, a)| *a).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    for (v, (name, _)) in variants.iter().enumerate() {
        for &lr in &RATES {
            for &m in &BUFFERS {
                let a = mean(&|j| j.0 == v && j.1 == lr && j.2 == m);
                println!("{name}\t{lr}\t{m}\t{:.2}", 100.0 * a);
            }
        }
    }
    println!();
    println!("method\tbest_lr\tval_acc_over_buffers");
    let mut overall = vec![0.0; RATES.len()];
    for (v, (name, _)) in variants.iter().enumerate() {
        let per_rate: Vec<f64> = RATES.iter().map(|&lr| mean(&|j| j.0 == v && j.1 == lr)).collect();
        for (o, a) in overall.iter_mut().zip(&per_rate) {
            *o += a / variants.len() as f64;
        }
        let best = (0..RATES.len()).max_by(|&a, &b| per_rate[a].total_cmp(&per_rate[b])).unwrap();
        println!("{name}\t{}\t{:.2}", RATES[best], 100.0 * per_rate[best]);
    }
    let best = (0..RATES.len()).max_by(|&a, &b| overall[a].total_cmp(&overall[b])).unwrap();
    println!("all\t{}\t{:.2}", RATES[best], 100.0 * overall[best]);
}
