//! Lifelong density counting.
//!
//! A single density regressor is trained on a sequence of counting domains.
//! Each new domain is learned with an L1 count loss, an entropic optimal
//! transport term and a normalized regularizer, while a frozen copy of the
//! previous model distills its outputs and features into the student.
//! Forgetting is measured with normalized backward transfer.

pub mod data_synth;
pub mod density;
pub mod error;
pub mod lifelong;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ot;
pub mod report;
pub mod run;

pub use error::{Error, Result};
