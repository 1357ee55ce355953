//! Desk-scale testbed for sensing-assisted LoS/NLoS identification in UAV
//! positioning: procedural urban scenes, a ray-geometric UAV-to-ground
//! channel, a synthetic nadir camera, a dual-input fusion classifier built
//! on an in-crate autodiff engine, and ToA trilateration that filters
//! receivers by predicted link state.

pub mod channel;
pub mod dataset;
pub mod model;
pub mod positioning;
pub mod scene;
pub mod sensing;
pub mod tensor;
