//! One module per subcommand.

pub mod dataset;
pub mod fixtures;
pub mod intervene;
pub mod similarity;
pub mod trace;
