//! Simulation of hyperentanglement concentration and purification for
//! two-photon systems entangled in polarization, spatial mode and frequency.

pub mod error;
pub mod gadgets;
pub mod hyperstate;
pub mod numfmt;
pub mod optics;
pub mod oracle;
pub mod protocols;
pub mod report;
pub mod cli;

pub use error::{Error, Result};
