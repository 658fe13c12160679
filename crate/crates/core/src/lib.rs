//! Value functions of finite-horizon minimax impulse-control games.
//!
//! A controller may shift the state by impulses at a cost while an
//! adversary steers the continuous dynamics. The value is computed on a
//! tensor-product grid with backward semi-Lagrangian schemes and checked
//! against a brute-force lattice oracle.

pub mod checks;
pub mod export;
pub mod expr;
pub mod grid;
pub mod impulse;
pub mod oracle;
pub mod policy;
pub mod problem;
pub mod problem_file;
pub mod solver;
