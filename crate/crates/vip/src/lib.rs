//! Command-line tools and an HTTP session service for variational
//! information pursuit checkpoints.

pub mod cli;
pub mod service;
pub mod session;
