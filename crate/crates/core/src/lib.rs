pub mod data;
pub mod error;
pub mod exploitability;
pub mod problem;
pub mod kkt;
pub mod mechanism;
pub mod nn;
pub mod solver;

pub use error::{Error, Result};
pub use problem::{Allocation, BoxBounds, ProblemInstance};
pub use solver::{PfSolution, SolverConfig};
pub use kkt::{AdjointSolution, Differentiability, KktSystem};
pub use nn::{MlpParams, OptimizerKind, OptimizerState, OutputHead};
pub use mechanism::{Mechanism, MechanismKind, NetArch, PaResult, ReportContext};
pub use exploitability::{Misreport, MisreportSearchConfig};
pub use data::{Dataset, Provenance};
pub mod training;
pub use training::{HistoryRow, LearnedKind, LrSchedule, TrainConfig, TrainState};
pub mod experiments;
pub use experiments::{ExperimentReport, MechanismRow, Summary};
