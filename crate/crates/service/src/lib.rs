//! Network facade for interactive, paced runs.
//!
//! A single thread owns the simulation ([`driver`]); HTTP handlers ([`api`])
//! talk to it through a serialized command queue and receive snapshot
//! copies. Every command is logged with the logical time it applied at, so
//! the scenario plus the log replays the session ([`session`]).

pub mod api;
pub mod driver;
pub mod session;

pub use api::{router, StreamItem, CLIENT_HEADER};
pub use driver::{
    Ack, ApiError, Envelope, ErrorKind, Frame, FrameBody, Handle, Op, Query, ServiceConfig, ServiceEvent,
};
pub use session::{LoggedCommand, Session};

/// Serves `handle` on `listener` until the process stops.
pub async fn serve(listener: tokio::net::TcpListener, handle: Handle) -> std::io::Result<()> {
    axum::serve(listener, router(handle)).await
}
