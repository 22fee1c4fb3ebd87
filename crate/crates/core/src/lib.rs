pub mod adapters;
pub mod duration;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod numerics;
pub mod ode;
pub mod optim;
pub mod tasks;
pub mod transformer;

pub use error::{Error, Result};
