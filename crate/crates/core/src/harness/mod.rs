//! Synthetic data, training, evaluation and gradient auditing.

mod audit;
mod checkpoint;
mod config;
mod data;
mod eval;
pub mod model;
mod train;

pub use audit::{gradient_audit, AuditEntry, AuditReport, AUDIT_EPS, AUDIT_SEEDS, AUDIT_TOLERANCE};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{Mode, RunConfig};
pub use data::{generate_synthetic, ndc_to_pixels, project_mesh, Dataset, SceneSample, BACKGROUND};
pub use eval::{check_compatible, evaluate, Prediction, Predictor};
pub(crate) use train::TextureInputs;
pub use train::{log_text, train, StepLog, TrainOutput};
