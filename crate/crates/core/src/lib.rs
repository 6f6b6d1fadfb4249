pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod gradcheck;
pub mod layers;
pub mod pooling;
pub mod se_resnet;
pub mod tensor;
pub mod vc;

pub use error::{Error, Result};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type SpeakerEncoder64 = pooling::SpeakerEncoder<f64>;
pub type SpeakerEncoder32 = pooling::SpeakerEncoder<f32>;
pub type VcModel64 = vc::VcModel<f64>;
pub type VcModel32 = vc::VcModel<f32>;
