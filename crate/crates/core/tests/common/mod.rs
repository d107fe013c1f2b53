//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod codec;
pub mod grad;
pub mod props;
pub mod runs;
