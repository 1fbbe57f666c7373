//! Crate error type.

use alloc::string::String;

/// Errors produced by construction, assembly, and solver routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Quadrature or basis order outside the supported range.
    #[error("invalid order: {0}")]
    InvalidOrder(String),
    /// Nodes coincide or a basis transformation is numerically singular.
    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),
    /// Vector/matrix dimensions do not match.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Mesh construction failed or an element is inverted.
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    /// A coefficient is non-positive where positivity is required.
    #[error("coefficient error: {0}")]
    Coefficient(String),
    /// Structural integrity violation (sparsity pattern, column counts).
    #[error("structural integrity: {0}")]
    Structure(String),
    /// DOF numbering bijection could not be established.
    #[error("mapping error: {0}")]
    Mapping(String),
    /// Factorization breakdown or loss of positive definiteness.
    #[error("definiteness error: {0}")]
    Definiteness(String),
    /// An iterative method hit its iteration limit.
    #[error("iteration limit: {0}")]
    IterationLimit(String),
    /// Eigensolver failed to converge.
    #[error("eigensolver failure: {0}")]
    Eigensolver(String),
    /// Desk-scale guard exceeded (dense path requested on a large operator).
    #[error("scale guard: {0}")]
    Scale(String),
    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),
}
