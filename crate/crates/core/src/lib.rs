//! Configuration-driven semantic segmentation of historical document pages.

pub mod callbacks;
pub mod config;
pub mod data;
pub mod eval;
pub mod logging;
pub mod model;
pub mod nn;
pub mod runner;
pub mod seed;
pub mod task;
