//! Generator streams and the patch discriminator.

pub mod config;
pub mod discriminator;
pub mod generator;

pub use config::{Ablation, NetworkConfig};
pub use discriminator::{Discriminator, SpectralState};
pub use generator::{composite, Decoding, ForwardOptions, ForwardResult, Fusion, Generator, StructureEncoding};
