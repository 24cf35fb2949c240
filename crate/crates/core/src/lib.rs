//! Detection and scoring of personality-relevant self-statements in
//! user-generated text.

pub mod annotation;
pub mod config;
pub mod corpus;
pub mod detection;
pub mod error;
pub mod feedback;
pub mod pca;
pub mod project;
pub mod remote;
pub mod similarity;
pub mod store;
pub mod tasks;
pub mod taxonomy;
pub mod utilization;

pub use error::{Error, Result};
