//! Command line and HTTP front end for guided one-step super-resolution.

pub mod api;
pub mod cli;
pub mod server;

pub use api::{decode_infer_request, InferRequest, InferResponse};
pub use server::{handle_infer, router, AppState};
