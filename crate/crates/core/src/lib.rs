pub mod autodiff;
pub mod container;
pub mod data;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod masking;
pub mod model;
pub mod preprocess;
pub mod probe;
pub mod sigsynth;
pub mod training;

pub use data::{Channel, Dataset, Labels, SignalSample, Split};
pub use error::{Error, Result};
