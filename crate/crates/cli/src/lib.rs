//! Library side of the `gprop` command: run configuration, single runs,
//! the speedup harness and its reports.

pub mod bench;
pub mod config;
pub mod fetch;
pub mod report;
pub mod run;

pub use bench::{run_bench, BenchConfig, Farm};
pub use config::{ConfigError, JobConfig, RunConfig};
pub use report::{BenchRow, Mode, RepRecord};
