//! Real-time robot I/O: transports, node runtime, station, recorder,
//! policy runtime, benchmarks and the console gateway.

pub mod bench;
pub mod clock;
pub mod gateway;
pub mod middleware;
pub mod node;
pub mod policy;
pub mod recorder;
pub mod sim;
pub mod station;
pub mod teleop;
