//! File formats, checkpoints and the command-line front end of the SWPC
//! decoder. The algorithms live in `swpc-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod logs;
