//! Feature-distributed SVRG for regularized linear classification, with
//! serial and instance-distributed baselines and exact scalar accounting.
//!
//! The crate is `no_std` and only needs `alloc`. Execution is single-context:
//! distributed algorithms are driven by deterministic schedulers that charge
//! every simulated message to a [`comm::CommLedger`]. Threaded and socket
//! transports live in the companion `fdsvrg` crate and reuse the per-worker
//! state machines defined here.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod analysis;
pub mod comm;
pub mod config;
pub mod data;
pub mod dsvrg;
pub mod error;
pub mod fd;
pub mod model;
pub mod ps;
pub mod sampling;
pub mod svrg;
pub mod synth;
pub mod trace;
