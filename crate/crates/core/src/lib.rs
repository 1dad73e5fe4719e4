//! Models, data pipeline, and training loops for SAR ship classification:
//! a capsule network with dynamic routing, a small CNN baseline, per-class
//! DCGAN rebalancing, and the dataset/checkpoint plumbing they share.

pub mod capsnet;
pub mod checkpoint;
pub mod cnn;
pub mod data;
mod error;
pub mod gan;
pub mod gradsuites;
mod init;
pub mod optim;
pub mod report;
pub mod train;

pub use error::{CoreError, Result};
