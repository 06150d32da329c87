//! Runtime companion to `fdsvrg-core`: LIBSVM input, CSV output, a
//! threaded message fabric with in-process and localhost-socket backends,
//! threaded runners for every distributed algorithm, and the experiment
//! harness behind the `fdsvrg` binary.

pub mod error;
pub mod fabric;
pub mod harness;
pub mod libsvm;
pub mod output;
pub mod threaded;

pub use error::Error;
