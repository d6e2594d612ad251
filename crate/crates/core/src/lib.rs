pub mod attention;
pub mod ablate;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod lge;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use autodiff::{grad_check, grad_check_many, Tape, Var};
pub use error::{Error, Result};
pub use params::{Graph, Group, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
