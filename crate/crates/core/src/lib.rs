pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod image;
pub mod metric;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod synth;
pub mod testkit;
pub mod tracker;
