pub mod attention;
pub mod error;
pub mod layers;
pub mod maskcodec;
pub mod maskgan;
pub mod metrics;
pub mod phantomdata;
pub mod pipeline;
pub mod translator;

pub use error::{Error, Result};
