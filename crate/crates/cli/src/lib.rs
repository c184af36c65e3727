//! Library side of the `par-riccati` command-line tool.

pub mod bench;
pub mod demo;
pub mod io;
pub mod solve;
