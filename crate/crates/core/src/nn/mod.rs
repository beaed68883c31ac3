//! Parameter storage and the equalized-learning-rate layers the networks are
//! assembled from.

mod layers;
mod params;

pub use layers::{Conv2d, Linear, ModConv, SQRT2};
pub use params::{GroupSet, Param, ParamGroup, ParamId, ParamStore};
