//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

pub mod gradients;
pub mod kl;
pub mod moments;
