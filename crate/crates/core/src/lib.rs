//! Few-shot intent detection on fixed sentence embeddings.
//!
//! The crate covers the whole classifier pipeline: loading intent corpora
//! and drawing balanced K-shot training subsets ([`dataset`]), binary stores
//! of precomputed encoder vectors ([`embeddings`]), a small MLP trained from
//! scratch on those vectors ([`mlp`]), the evaluation and hyperparameter
//! sweep protocol ([`experiments`]) and timing utilities ([`bench`]).

pub mod bench;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod experiments;
pub mod mlp;
pub mod rng;
pub mod synthetic;

pub use dataset::{build_label_index, few_shot_sample, Dataset, Digest, FewShotSplit, LabelIndex};
pub use embeddings::{concat_stores, EmbeddingStore};
pub use error::{Error, ErrorKind, Result};
pub use mlp::{init_model, train, MlpConfig, MlpModel, Mode, Optimizer};
pub use experiments::{
    compare_to_reference, run_experiment, run_sweep, sweep_grid, ExperimentResult, ExperimentSpec, Regime, SweepReport,
};
