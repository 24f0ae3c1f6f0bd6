pub mod config;
pub mod lab;
pub mod pipeline;
pub mod record;
pub mod service;
pub mod error;

pub use error::{Error, Result};
