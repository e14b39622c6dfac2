//! Minimum-error tree decomposition of binary variables.
//!
//! Given pairwise correlations over `n` binary variables, [`topology`] grows a
//! rooted tree whose leaves are the variables and whose internal nodes are
//! hidden variables, greedily combining the pieces with the smallest quartet
//! error. [`parameters`] then recovers edge correlations by least squares in
//! the log domain and fits the hidden-node probabilities.

pub mod correlation;
pub mod io;
pub mod parameters;
pub mod quartet;
pub mod synth;
pub mod topology;
pub mod tree;

pub use correlation::{compute_correlations, CorrelationMatrix, SampleTable};
pub use quartet::{quad_error, ErrorMode, ErrorReport};
pub use topology::{decompose, Decomposition, Stage1Config, TiePolicy};
pub use tree::{DecompTree, ForestState, NodeId, SimplifyPolicy};
