//! State-aware graph recurrent network for daily water-temperature
//! prediction in river networks with reservoirs.

pub mod data;
pub mod diff;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod train;
pub mod eval;
pub mod check;
pub mod cli;
pub mod config;
