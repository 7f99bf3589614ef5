pub mod cli;
pub mod data;
pub mod encoder;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod semantic;
pub mod tokenizer;
pub mod training;
