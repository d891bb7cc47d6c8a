//! Online continual learning with asymmetric replay.
//!
//! A small reverse-mode autodiff core ([`tensor`]) drives an MLP feature
//! extractor with a cosine prototype head ([`network`]). The [`trainer`] runs
//! single-pass streams ([`stream`]) with a reservoir buffer ([`buffer`]) under
//! one of several replay losses ([`losses`]): plain ER, asymmetric
//! cross-entropy (ER-ACE), asymmetric metric learning (ER-AML, SupCon or
//! triplet) and a doubly-masked SS-IL-style ablation. [`metrics`] records
//! anytime accuracy, forgetting, drift, gradient norms and compute/memory
//! ledgers; [`report`] handles configs, sweeps and report files.

pub mod batch;
pub mod buffer;
pub mod error;
pub(crate) mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod par;
pub mod report;
pub mod stream;
pub mod tensor;
pub mod trainer;

pub use batch::LabeledBatch;
pub use buffer::ReplayBuffer;
pub use error::{Error, Result};
pub use losses::{LossConfig, Method, NegativePolicy};
pub use network::ModelParams;
pub use par::Execution;
pub use stream::{Dataset, StreamConfig, StreamMode, SyntheticDatasetSpec};
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{RunReport, TrainerConfig};
