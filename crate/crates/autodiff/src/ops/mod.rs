pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod shape;
pub mod upsample;
