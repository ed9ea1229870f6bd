//! Guideline-constrained, weakly supervised HER2 scoring on abstract patch
//! data.
//!
//! The pipeline runs in three stages over slides whose patches carry feature
//! vectors and tumor-surface weights:
//!
//! 1. [`trainer::pretrain`] fits a linear-softmax patch classifier with each
//!    patch labeled by its slide.
//! 2. [`trainer::train_weak`] checks every slide's predicted class fractions
//!    against the guideline thresholds ([`guidelines`]), selects the patches
//!    responsible for broken constraints ([`selection`]) and pushes them away
//!    from (partial-label loss) or toward (cross-entropy) a class.
//! 3. [`calibrate::optimize_alpha`] freezes the classifier and rescales its
//!    logits per class to minimize the hinge distance to the thresholds.
//!
//! [`synth`] generates cohorts with known patch classes and [`evaluation`]
//! scores each stage.

pub mod calibrate;
pub mod error;
pub mod evaluation;
pub mod guidelines;
pub mod io;
pub mod model;
pub mod selection;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use guidelines::{ClassFractionVector, ConstraintMatrices, GuidelineVerdict, Her2Class, Violation};
pub use model::{ClassifierParams, Patch, Slide};
