//! Allocation-only core of the rio robot I/O framework.
//!
//! Everything in this crate is pure: no clocks, threads, sockets or files.
//! Storage structures (`ring`, `rpc`) operate in place on slices of
//! [`AtomicU64`](core::sync::atomic::AtomicU64) words so the same code backs
//! heap regions (threads in one process) and memory-mapped regions shared
//! between processes. The `rio` crate supplies clocks, transports and IO.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod camera;
pub mod codec;
pub mod downsample;
pub mod executor;
pub mod kinematics;
pub mod morphology;
pub mod ring;
pub mod rpc;
pub mod schema;
pub mod stats;
pub mod step;
pub mod teleop;
pub mod time;
mod words;

pub use codec::CodecError;
pub use ring::{RingBuffer, RingError};
pub use rpc::{ApiMethod, ApiSchema, CommandReply, CommandRequest, QueueError, RequestChannel};
pub use schema::{DType, Field, Payload, SchemaDescriptor, SchemaError, TimedSample, Value};
pub use time::Timestamp;
