//! Static analysis of secret-dependent memory accesses and branches.

pub mod absint;
pub mod checker;
pub mod domain;
pub mod ir;
pub mod oracle;
