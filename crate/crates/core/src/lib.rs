pub mod channel;
pub mod covariance;
pub mod dual;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod joint;
pub mod numerics;
pub mod schemes;
pub mod seed;

pub use error::{Error, Result};
