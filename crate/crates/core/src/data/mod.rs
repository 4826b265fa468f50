//! Synthetic ground truth and experimental cycling data.

mod experimental;
mod synthetic;

pub use experimental::*;
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};
