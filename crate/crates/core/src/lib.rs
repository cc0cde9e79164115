//! Two-level contrastive video-language embedding training.
//!
//! Clip and text encoders are trained to match clips with their narrations
//! (child level) while aggregated clip and narration features of a whole video
//! are matched with the video's summary (parent level).

pub mod aggregation;
pub mod autodiff;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evalsuite;
pub mod experiments;
pub mod gradients;
pub mod model;
pub mod objectives;
pub mod trainer;
mod transformer;

pub use error::{Error, Result};
