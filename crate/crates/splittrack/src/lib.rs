//! File formats, run profiles, reports and the command-line front end for
//! `splittrack-core`.

pub mod cli;
pub mod formats;
pub mod profile;
pub mod report;
