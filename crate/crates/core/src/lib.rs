pub mod cli;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tensor;
