//! Library side of the `kmc` command: configuration, result files, the
//! experiment runners and the check suite.

pub mod checks;
pub mod config;
pub mod output;
pub mod runs;
