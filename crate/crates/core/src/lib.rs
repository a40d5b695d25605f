//! Architecture search for 3D segmentation networks.
//!
//! A search space maps continuous points to integer network configurations.
//! Each configuration is built into a layer graph, priced for parameters
//! and memory, and scored by a pluggable evaluator. Controlled random search
//! with local mutation drives the loop.

pub mod archbuilder;
pub mod blockgraph;
pub mod cli;
pub mod crs;
pub mod evaluators;
pub mod objective;
pub mod report;
pub mod searchspace;

pub use archbuilder::{
    build_network, count_parameters, estimate_resources, ArchConfig, ArchSettings, MemoryBudget, NetworkIR,
    ResourceEstimate,
};
pub use blockgraph::{BlockSpec, LegalityVerdict, Operation, OperationMatrix, ViolationKind};
pub use crs::{random_search, run_search, CrsConfig, SearchResult};
pub use evaluators::{AnalyticEvaluator, ExternalTrainer, Landscape, SurrogateEvaluator};
pub use objective::{EvalPipeline, EvaluationOutcome, Evaluator, Objective, OutcomeKind};
pub use searchspace::{CacheKey, DecodedConfig, RelaxedPoint, SearchSpace};
