//! HTTP serving for the two pipeline stages and a client for remote embedding services.

pub mod api;
pub mod client;
pub mod server;

pub use client::{RemoteEmbedder, RemoteEmbedderConfig};
pub use server::{load_state, router, serve, serve_in_background, AppState, ServeConfig};
