pub mod cloud;
pub mod d2d;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod filter;
pub mod formats;
pub mod mesh;
pub mod net;
pub mod pipeline;
pub mod scene;

pub use error::{Error, Result};
