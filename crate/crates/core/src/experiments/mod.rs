//! Scripted measurements behind each claim: upsampling variance decay, the
//! unit-block constants, gradient ratios under disequilibrium, equivalence of
//! injected and calibrated equalizers, a per-head audit and toy training.

pub mod audit;
pub mod calibrate;
pub mod constants;
pub mod data;
pub mod equivalence;
pub mod fig2;
pub mod probe;
pub mod prop1;
pub mod suite;
pub mod summary;
pub mod variance_decay;
pub mod train;

pub use audit::{run_head_audit, AuditReport, AuditRow, HeadAudit};
pub use calibrate::{run_calibrate, Calibration, CalibrationSummary};
pub use constants::{relu_bn_mean, relu_bn_variance, run_constants, ConstantsReport};
pub use data::{class_shares, collate, gen_synthetic_dataset, SyntheticSample};
pub use equivalence::{run_equivalence, EquivalenceReport};
pub use fig2::{run_fig2, Fig2Report, Fig2Row};
pub use prop1::{run_prop1, Prop1Report, Prop1Row};
pub use suite::{run_stage, run_suite, Stage, StageOutcome};
pub use summary::{csv_string, write_csv, Assertion, Summary};
pub use variance_decay::{run_variance_decay, VarianceDecayReport};
pub use train::{run_toy_train, TrainReport, TrainRow};
