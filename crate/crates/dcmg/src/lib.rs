//! Scenario files, trajectory CSV output, run summaries and the acceptance
//! checks for [`dcmg_core`].

pub mod batch;
pub mod output;
pub mod report;
pub mod scenario;
pub mod verify;

pub use batch::{run_batch, BatchJob};
pub use output::{emit_csv, emit_events, read_csv, trajectory_header, Dims, OutputError};
pub use report::SummaryReport;
pub use scenario::{parse_scenario, parse_scenario_str, LoadedScenario, ScenarioError, ScenarioFile};
pub use verify::{verify, CriterionResult, Status, VerifyReport};
