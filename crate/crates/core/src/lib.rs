//! Design and validation toolkit for centralised multimode power-oscillation
//! damping controllers that act through stochastic, rate-limited
//! communication channels.

pub mod error;
pub mod lti;

pub use error::{Error, Result};
pub mod channel;
pub mod delaymodel;
pub mod refplant;
pub mod sysid;
pub mod analysis;
pub mod poddesign;
pub mod pipeline;
pub mod simloop;
