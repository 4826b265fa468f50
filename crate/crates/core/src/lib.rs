//! Battery state-of-health modeling with hybrid physics/neural ODEs.

pub mod data;
pub mod error;
pub mod neuralode;
pub mod nn;
pub mod ode;
pub mod optim;
pub mod physics;
pub mod scalar;
pub mod scaler;
pub mod train;
pub mod ude;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations used by the command-line harness.
pub type BatteryParamsF64 = physics::BatteryParams<f64>;
pub type TrajectoryF64 = physics::Trajectory<f64>;
pub type UdeModelF64 = ude::UdeModel<f64>;
pub type NodeModelF64 = neuralode::NodeModel<f64>;
pub type TrainDataF64 = train::TrainData<f64>;
pub type TrainRunF64 = train::TrainRun<f64>;

/// Single-precision instantiations.
pub type BatteryParamsF32 = physics::BatteryParams<f32>;
pub type UdeModelF32 = ude::UdeModel<f32>;
pub type NodeModelF32 = neuralode::NodeModel<f32>;
