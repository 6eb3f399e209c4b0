//! Mass-balanced material flow analysis (MFA) networks with network-structure
//! uncertainty, Bayesian structure inference, and optimal data-collection
//! design.
//!
//! An MFA network is a directed graph where nodes are processes and edges are
//! mass flows. Flows are parameterized by per-node allocation fractions `φ`
//! (each node's outgoing fractions live on a simplex) and external inputs `q`,
//! so nodal throughputs solve the linear system `(I − Φᵀ) x = q`. When the
//! *presence* of some edges is uncertain, every on/off combination of the
//! uncertain edges is a candidate structure, and collected flow data updates a
//! posterior over candidates through the marginal likelihood (model evidence)
//! of each structure.
//!
//! The `estimators` module scores prospective data-collection designs by the
//! mutual information between the structure indicator and the yet-unseen data,
//! using three nested Monte Carlo estimators over a shared batch of prior
//! samples with precomputed flow predictions.

pub mod batch;
pub mod benchmark;
pub mod design;
mod error;
pub mod estimators;
pub mod evidence;
pub mod likelihood;
pub mod linsys;
pub mod network;
pub mod numeric;
pub mod priors;
pub mod rng;

pub use batch::ReuseBatch;
pub use design::{Design, Observation, Target};
pub use error::{Error, ErrorCategory, Result};
pub use estimators::{enumerate_designs, optimize_design, rank_designs, EstimatorId, UtilityEstimate};
pub use evidence::{kl_divergence, log_model_evidence, model_posterior, ModelPosterior};
pub use linsys::{assemble_system, solve_nodal_flows, NodalFlows};
pub use network::{enumerate_candidates, CandidateSet, Edge, NetworkStructure, Nodes, PriorKind};
pub use priors::{AllocationPrior, InputPrior, ParameterSample};
pub use rng::{RngFactory, StreamPurpose};
