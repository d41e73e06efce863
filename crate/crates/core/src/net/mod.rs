//! Backbone, shared classifier, fusion head and their building blocks.

pub mod checkpoint;
pub mod image;
pub mod layers;
pub mod model;
