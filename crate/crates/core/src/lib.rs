//! Hybrid explicit-implicit learning for multiscale parabolic problems: fine finite
//! elements, a two-space coarse decomposition, the partially explicit splitting
//! scheme, and an encoder-decoder attention surrogate for the implicit part.

pub mod error;
pub mod experiment;
pub mod fem;
pub mod io;
pub mod multiscale;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod splitting;
pub mod transformer;

pub use error::{Error, Result};
pub use fem::{FineMesh, PermeabilityField, SparseMatrix};
pub use multiscale::{CoarseMesh, ProjectedSystem, SpaceDecomposition};
pub use splitting::{SolverConfig, SplitState, Stepper, Trajectory};
