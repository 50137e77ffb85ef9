//! Command-line workflow and HTTP service for nonintrusive reduced-basis models.

pub mod commands;
pub mod service;
