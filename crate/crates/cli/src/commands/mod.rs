//! Subcommand implementations.

pub mod compare;
pub mod crossval;
pub mod fit;
pub mod orthogonalize;
pub mod predict;
pub mod simulate;
