//! Images, masks, structure labels, pyramids and augmentation.

pub mod augment;
pub mod dataset;
pub mod image_io;
pub mod mask;
pub mod pyramid;
pub mod structure;
pub mod synthetic;

pub use dataset::{augment, make_sample, Batch, Dataset, ImageSample, MaskSource};
pub use image_io::{image_dimensions, load_image, load_mask, save_image, save_mask};
pub use mask::{bin_index, default_bins, generate_irregular_mask, hole_ratio, MaskBin};
pub use pyramid::{build_pyramid, build_pyramids};
pub use structure::structure_label;
