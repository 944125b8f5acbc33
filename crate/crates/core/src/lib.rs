//! Breath-sharing toolkit: dual-IMU respiration sensing, vibrotactile
//! envelope generation, the amplitude-order wire protocol, closed-loop
//! breather simulation and trace synchrony analysis.

pub mod analysis;
pub mod envelope;
pub mod protocol;
pub mod relay;
pub mod sensing;
pub mod sim;
