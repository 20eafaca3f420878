//! Deterministic simulation core for federated learning across
//! multi-device environments.
//!
//! Each user owns several devices that record the same activity stream in a
//! time-aligned manner. The crate provides the building blocks of a federated
//! round loop over such a population: a small dense classifier with Adam
//! training, class-based data partitioning for generating large federated
//! populations from small datasets, sliced-Wasserstein heterogeneity
//! measurement, hardware energy / network bandwidth profiles, utility-driven
//! device selection, and weight-regularized per-device personalization.
//!
//! Everything in this crate is a pure function of its inputs plus explicit
//! seeds: identical inputs produce bit-identical outputs, independent of
//! platform. Transcendental math goes through `libm` rather than the host
//! libm, and all iteration orders are fixed (sorted keys, ascending device
//! order).
//!
//! The crate is `no_std`-compatible (with `alloc`); the companion CLI crate
//! carries all file formats and IO.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
mod fx;
pub mod heterogeneity;
pub mod model;
pub mod profiles;
pub mod rng;
pub mod selection;
pub mod sim;

pub use error::{Error, Result};
