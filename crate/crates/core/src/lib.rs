pub mod bounds;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod io;
pub mod maml_sgd;
pub mod meta_model;
pub mod oracle;
pub mod risk;
pub mod rng;
pub mod spectra;

pub use error::{LabError, Result};
