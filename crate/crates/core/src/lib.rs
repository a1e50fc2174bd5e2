//! Planning, schedule simulation and toy-scale numerics for collaborative
//! fine-tuning of transformer side networks on clusters of edge devices.
//!
//! - [`model_cost`]: parameter, FLOPs, memory and cache-size models.
//! - [`profile`]: per-device timing tables and the link model.
//! - [`planner`]: dynamic-programming stage partitioning and stage-count
//!   selection, with an exhaustive oracle for small instances.
//! - [`sim`]: discrete-event 1F1B simulator, cached data-parallel epochs,
//!   activation redistribution, trace export.
//! - [`adapters`]: frozen toy transformer, side-network forward/backward,
//!   training loop and operation census.
//! - [`cache_store`]: on-disk activation cache.

pub mod adapters;
pub mod cache_store;
pub mod model_cost;
pub mod par;
pub mod planner;
pub mod profile;
pub mod sim;
