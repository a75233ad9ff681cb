//! Rigid-motion discovery and 4D reconstruction from 2D point tracks.

pub mod clustering;
pub mod config;
pub mod error;
pub mod eval;
pub mod export;
pub mod geometry;
pub mod gradient;
pub mod optimizer;
pub mod procrustes;
pub mod rigidity;
pub mod trackdata;

pub use error::{Error, Result};
