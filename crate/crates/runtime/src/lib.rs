//! Controller/worker execution of the consensus loop over pluggable transports.

pub mod controller;
pub mod driver;
pub mod error;
pub mod message;
pub mod transport;
pub mod worker;

pub use controller::{
    ControllerConfig, ControllerCore, FrameRecord, IterationRow, TimingSource, Transcript,
};
pub use driver::{run_sequential, run_threaded, IterationView, TransportKind};
pub use error::{Result, RuntimeError};
pub use message::Message;
pub use transport::{InProcTransport, Peer, TcpTransport, Transport};
pub use worker::{Outcome, WorkerCore};
