//! Configuration and plotting behind the `vla` binary.

pub mod config;
pub mod plot;
