pub mod ablation;
pub mod captions;
pub mod csse;
pub mod ctx;
pub mod data;
pub mod diag;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod mmfa;
pub mod modality;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tmse;
pub mod train;

pub use error::{Error, Result};
pub use modality::{Modality, PerModality};
