//! Rare-token neuron analysis for GPT-2-layout transformers.
//!
//! The crate scores a corpus with a CPU reference model, mean-ablates every
//! final-layer MLP neuron to measure its influence on rare-token loss, and
//! characterizes the resulting neuron population: the shape of the ranked
//! influence curve, heavy-tail spectra of group weights, and the geometry
//! of group activations.
//!
//! Start with [`pipeline::run_pipeline`] or the runnable programs under
//! `examples/`.

pub mod ablation;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod phases;
pub mod pipeline;
pub mod spectra;
pub mod tensor;
pub mod toy;

pub use ablation::{classify_groups, influence_sweep, mean_activations, CorpusCache, EvalRows, InfluenceProfile, NeuronGroup};
pub use corpus::{select_rare_targets, EvalSet, FrequencyTable, TokenStream, ValidityMask};
pub use error::{Error, Result};
pub use model::{load_model, Model, ModelConfig};
pub use pipeline::{run_pipeline, AnalysisConfig, InputPaths, RunConfig};
pub use tensor::{load_tensor, save_tensor, Tensor};
