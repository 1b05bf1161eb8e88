//! Multi-drone active motion capture: simulator, perception, credit assignment,
//! policy learning and evaluation.

pub mod baselines;
pub mod config;
pub mod crowdworld;
pub mod env;
pub mod experiment;
pub mod geometry3d;
pub mod marl;
pub mod metrics;
pub mod neural;
pub mod par;
pub mod perception;
pub mod reward;
pub mod scene;
pub mod safety;
