mod broadcast;
mod conv;
mod elementwise;
mod matmul;
mod norm;
mod resize;
mod shape;

pub use norm::{group_stats, NormGroups};
pub use resize::{linear_taps, resize_plane};
pub use shape::FILL;

pub(crate) use elementwise::sigmoid as sigmoid_scalar;
