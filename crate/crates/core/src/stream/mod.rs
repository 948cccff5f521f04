//! Operational shell: batch files, state persistence and the stream driver.

pub mod batchfile;
pub mod driver;
pub mod statefile;

pub use batchfile::{load_batch, read_batch, save_batch, write_batch};
pub use driver::{run_stream, BatchReport, DriverHooks, LiveClusters, NoHooks, Session, StreamConfig, StreamRun};
pub use statefile::{load_state, save_state, StoredState};
