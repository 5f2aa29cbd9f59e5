pub mod numerics;
pub mod trackdata;
pub mod clustering;
pub mod embeddings;
pub mod assembler;
pub mod model;
pub mod synth;
pub mod evaluation;
pub mod config;
pub mod cli;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Model32 = model::MintimeModel<f32>;
pub type Model64 = model::MintimeModel<f64>;
