//! Models, losses and data for cross-resolution keypoint distillation.
//!
//! A teacher sees a high-resolution image and a student sees the same
//! scene `m` times smaller. Both predict each keypoint coordinate as a
//! distribution over bins ([`simcc`]). The student learns from ground
//! truth and from the teacher through two extra losses:
//!
//! * a feature loss, after lifting the student's last feature to the
//!   teacher's size with a weighted ensemble of projectors ([`sape`]);
//! * a logit loss, after merging every `m` teacher bins into one so the
//!   class spaces agree ([`cca`]).
//!
//! The logit temperature is trained adversarially on an easy-to-hard
//! schedule ([`etht`]). Projectors and temperature are dropped after
//! training, so the deployed student is exactly the plain student network.

pub mod backbone;
pub mod cca;
mod error;
pub mod etht;
pub mod model;
pub mod params;
pub mod sape;
pub mod simcc;
pub mod synth;

pub use error::{CoreError, Result};
