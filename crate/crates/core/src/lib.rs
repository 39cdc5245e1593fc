//! Mixed ℓ2²+ℓpᵖ minimization under linear constraints.
//!
//! The solver minimizes `bᵀx + ‖Mx‖₂² + ‖Nx‖ₚᵖ` subject to `Ax = c` for
//! `p ≥ 2` by iterative refinement. Each refinement step approximately
//! maximizes a residual problem through a sweep of decision problems, each
//! solved by a width-reduced multiplicative-weights method. Residual
//! problems can be sparsified first, by spanners and spectral sampling for
//! voltage problems or by Lewis-weight row sampling for general matrices.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod driver;
pub mod error;
pub mod flowprep;
pub mod generate;
pub mod graph;
pub mod instance;
pub mod kkt;
pub mod lewis;
pub mod linsolve;
pub mod mwu;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod sparse;
pub mod voltage;

pub use error::{Error, Result};
pub use graph::Graph;
pub use instance::{FlowInstance, PNormProblem, ResidualProblem, VoltageInstance};
pub use sparse::SparseMatrix;
