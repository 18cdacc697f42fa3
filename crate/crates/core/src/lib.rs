pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub(crate) mod io;
pub mod modality;
pub mod nn;
pub mod optim;
pub mod pid;
pub mod rq;
pub mod saliency;
pub mod synergy;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use modality::Modality;
