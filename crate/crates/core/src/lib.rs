pub mod gateway;
pub mod graph;
pub mod memory;
pub mod retrieval;
pub mod roles;
pub mod eval;
pub mod pipeline;
pub mod datagen;
pub mod cost;
