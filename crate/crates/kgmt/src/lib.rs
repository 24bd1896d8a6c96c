//! File formats, checkpoints, run manifests, the ablation experiment and
//! the `kgmt` command line, built on `kgmt-core`.

pub mod checkpoint;
pub mod cli;
pub mod experiment;
pub mod io;
pub mod manifest;

pub use kgmt_core as core;
