pub mod accel;
pub mod bench;
pub mod error;
pub mod lie;
pub mod p2plane;
pub mod p2point;
pub mod spatial;

pub use error::{Error, Result};
