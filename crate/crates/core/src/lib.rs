pub mod analysis;
pub mod attention;
pub mod bench;
pub mod error;
pub mod kv_cache;
pub mod linalg;
pub mod reuse;
pub mod sim;
pub mod sparse;
pub mod verify;

pub use error::{Error, Result};
