pub mod autodiff;
pub mod cacs;
pub mod config;
pub mod csrr;
pub mod error;
pub mod eval;
pub mod export;
pub mod gradcheck;
pub mod gradsuite;
pub mod infolab;
pub mod linalg;
pub mod model;
pub mod ocl;
pub mod ocva;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Gradients, Var};
pub use config::{Ablation, TrainConfig};
pub use error::{Error, Result};
pub use model::{Model, Mode};
pub use tensor::Tensor;
