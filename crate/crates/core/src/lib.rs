//! Continuous-time action sequence modelling with a self-attention marked
//! temporal point process and cluster-conditioned lognormal inter-action times.

pub mod data;
pub mod encoder;
pub mod evaluation;
pub mod generation;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod synth;
pub mod training;
