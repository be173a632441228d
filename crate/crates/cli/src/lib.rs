//! Pipeline layer over the core inference crate: option resolution, stage
//! functions shared by the subcommands, the end-to-end experiment runner,
//! and plot-ready report regeneration.

pub mod config;
pub mod report;
pub mod stages;
