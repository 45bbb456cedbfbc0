//! REST service and command-line plumbing around the `metamem` runtime.

pub mod service;
pub mod setup;
