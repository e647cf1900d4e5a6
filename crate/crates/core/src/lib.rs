//! Skin-patch presentation attack detection: patch extraction from aligned
//! faces, a multi-branch CNN, error-rate metrics and a patch-only service.

pub mod bench;
pub mod data;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pem;
pub mod service;

#[cfg(any(test, feature = "reference"))]
pub mod reference;
