//! Synthetic specimen scenes, the detect → classify → segment model tournament,
//! region morphometrics and Tukey–Kramer statistics.

pub mod classify;
pub mod config;
pub mod crops;
pub mod detect;
pub mod error;
pub mod imgops;
pub mod mask;
pub mod morph;
pub mod pipeline;
pub mod pnm;
pub mod report;
pub mod runners;
pub mod segment;
pub mod stats;
pub mod synth;
pub mod tournament;
pub mod verify;
pub mod workflow;

pub use error::{CoreError, Result};
