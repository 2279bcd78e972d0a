pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gaussian;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod objectives;
pub mod optim;
pub mod runner;
pub mod tensor;
pub mod toys;
pub mod verify;

pub use autodiff::{Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use gaussian::{ClippedPrecisionPrior, DiagGaussian};
pub use linalg::SymMatrix;
pub use tensor::Tensor;
