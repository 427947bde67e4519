//! Semi-supervised teacher-student segmentation on paired clean/degraded scenes.
//!
//! Clean images with labels train the student directly. Degraded images go
//! through a weak view to the EMA teacher for confidence-filtered pseudo-labels,
//! and through two strong views with complementary channel dropout to the
//! student, which must reproduce those pseudo-labels.

pub mod augment;
pub mod config;
pub mod datagen;
pub mod evaluate;
pub mod gradcheck;
pub mod error;
pub mod losses;
pub mod model;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
