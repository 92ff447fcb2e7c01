//! Recovery-loop orchestration, configuration, trace persistence and checks.

pub mod config;
pub mod offline;
pub mod sim;
pub mod trace;
pub mod verify;

pub use config::{DeltaMode, MatrixSpec, NominalConfig, OutputConfig, RenConfig, RunConfig, SynthesisConfig, TerminalMode};
pub use offline::{synth_offline, write_offline, OfflineOutput};
pub use sim::{epoch_nominal, online_settings, run, solver_options, voltage_ratios, RunOutput};
pub use trace::{read_json, read_trace, write_json, write_trace, Flag, Metrics, StepSolution, TraceRow};
pub use verify::{verify_trace, VerifyReport};
