pub mod config;
pub mod error;
pub mod harness;
pub mod loss;
pub mod moe;
pub mod numerics;
pub mod pgke;
pub mod ptl;
pub mod seeding;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
