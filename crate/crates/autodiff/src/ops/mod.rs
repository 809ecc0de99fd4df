mod conv;
mod elementwise;
mod norm;
mod reduce;
mod resize;
mod shape;

pub use conv::conv_output_size;
pub use elementwise::sigmoid;
pub use reduce::ReduceKind;
pub use resize::{resize_down_tensor, ResizeMode};
