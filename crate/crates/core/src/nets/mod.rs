//! The five sub-networks and the model that owns them.

mod conv;
mod encoder;
mod heads;
mod layers;
mod model;
mod resize;
mod restrict;

pub use conv::{conv2d, conv_transpose2d, group_norm};
pub use layers::ParamStore;
pub use model::{anomaly_probability, Component, DsrModel, Encoded, Inference, ObjectSpecific};
pub use resize::{bilinear_matrix, resize_bilinear, upsample_nearest};
