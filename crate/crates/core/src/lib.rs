//! Noisy correspondence unlearning for toy two-tower contrastive models.

pub mod error;
pub mod confidence;
pub mod encoders;
pub mod hn_losses;
pub mod numcore;
pub mod ot;
pub mod pipeline;
pub mod synthgen;
pub mod unlearn_losses;

pub use error::{NcuError, Result};
pub use numcore::Matrix;
