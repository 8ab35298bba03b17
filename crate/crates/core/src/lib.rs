//! Open-world reliability auditing for frozen classifiers.
//!
//! The pipeline reads portable evaluation dumps ([`evaldump`]), computes
//! post-hoc OOD scores ([`scores`]) and rank metrics ([`metrics`]), breaks the
//! ID test set into confidence/correctness strata ([`taxonomy`]), probes
//! penultimate geometry ([`geometry`]), and renders benchmark tables
//! ([`report`]). [`vmr`] is a small training lab that produces dumps from
//! synthetic noisy-label tasks, with and without virtual-outlier energy
//! regularization.

pub mod error;
pub mod evaldump;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod report;
pub mod scores;
pub mod taxonomy;
pub mod vmr;

pub use error::{AuditError, Result};
pub use evaldump::{load_dump, validate_dump, write_dump, EvalDump, LinearHead, Role, ValidationReport};
pub use scores::{orient_ood_larger, Direction, ScoreKind, ScoreOptions, ScoreVector, Scorer};
