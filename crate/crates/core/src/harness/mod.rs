//! Evaluation harness: a synthetic application with a verifiable data
//! generator, scenario files and the supervisor that runs them.

pub mod generator;
pub mod rank;
pub mod runner;
pub mod scenario;
pub mod summary;

pub use rank::{serve_lines, RankCommand, RankParams, RankReply, SyntheticRank};
pub use runner::{run_scenario, AdaptRecord, RestoreRecord, RunOptions, RunReport};
pub use scenario::{AppSpec, Launch, ModeSpec, RegionSpec, Scenario};
pub use summary::{summarize, Agg, Comparison, Summary};
