pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod prompt;
pub mod seeding;
pub mod selftest;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
