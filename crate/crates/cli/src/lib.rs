//! Library surface of the `relmem` binary: command implementations and
//! checkpoint I/O, exposed so tests can drive them directly.

pub mod checkpoint;
pub mod commands;
