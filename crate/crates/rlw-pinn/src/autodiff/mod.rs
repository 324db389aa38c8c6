//! Automatic differentiation split along the two directions the solver needs:
//! derivatives with respect to the inputs (x, t) travel forward through
//! [`Jet`] values, derivatives with respect to the parameters travel backward
//! through a [`Tape`]. Jet components recorded on the tape are independent
//! values, so no derivative pass ever nests inside another.

pub mod jet;
pub mod tape;

pub use jet::{silu_derivs, Jet};
pub use tape::{FieldComp, NodeId, Tape};

/// Errors raised while propagating derivatives.
#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    /// A jet primitive produced a non-finite component.
    #[error("non-finite result from jet primitive `{op}`")]
    NonFinite { op: &'static str },
    /// A tape was asked for a scalar where the node holds a batch.
    #[error("tape node {node} does not hold a scalar value")]
    NotScalar { node: usize },
    /// Forward pass produced a non-finite value in the named node.
    #[error("non-finite value in tape node {node} ({op})")]
    NonFiniteNode { node: usize, op: &'static str },
    /// A node id was used with an incompatible operand kind.
    #[error("tape node {node} has the wrong kind for `{op}`")]
    WrongKind { node: usize, op: &'static str },
    /// An empty point batch was supplied where at least one point is needed.
    #[error("empty point batch for `{op}`")]
    EmptyBatch { op: &'static str },
}
