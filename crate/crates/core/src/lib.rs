pub mod autodiff;
pub mod correspondence;
pub mod error;
pub mod geometry;
pub mod io;
pub mod network;
pub mod outlier;
pub mod pose;
pub mod synth;
pub mod train;
pub mod transport;

pub use correspondence::{Correspondence, CorrespondenceSet};
pub use error::{Error, Result};
