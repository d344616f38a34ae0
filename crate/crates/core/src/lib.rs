pub mod analysis;
pub mod autodiff;
pub mod balance;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod moe;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
