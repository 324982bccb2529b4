pub mod abm;
pub mod cam;
pub mod error;
pub mod geo;
pub mod hud;
pub mod imagery;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod train;

pub use error::{Error, Result};
