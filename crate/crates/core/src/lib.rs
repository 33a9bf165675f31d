pub mod bench;
pub mod cli;
pub mod features;
pub mod frame;
pub mod geometry;
pub mod motion;
pub mod solver;
pub mod templates;
pub mod tracker;
