//! EventFace core: the full event-based face recognition pipeline at desk
//! scale — event stream simulation and encoding, a LoRA-adapted convolutional
//! backbone, motion prompt extraction, interleaved WKV spatiotemporal mixing,
//! adaptive-margin identity training and the biometric metric suite.
//!
//! Everything is fp64 and deterministic: a run is a pure function of its
//! configuration and seed.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod event;
pub mod metrics;
pub mod model;
pub mod mpe;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod stm;
pub mod tensor;
pub mod train;
