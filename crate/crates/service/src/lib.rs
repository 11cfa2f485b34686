//! Interactive promptable segmentation: images are encoded once into sessions and
//! then answered box prompt by box prompt over HTTP.

pub mod api;
pub mod error;
pub mod experiments;
pub mod http;
pub mod service;
pub mod session;

pub use error::{ServiceError, ServiceResult};
pub use service::Service;
