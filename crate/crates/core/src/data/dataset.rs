//! Directory datasets and per-sample preparation.
//!
//! Layout: every `*.png` / `*.jpg` / `*.jpeg` file directly inside the
//! dataset directory is an image, in lexicographic filename order. An
//! optional `structures/` subdirectory holding files with the same names
//! supplies precomputed structure labels; otherwise labels are computed by
//! [`structure_label`]. A mask directory holds binary PNGs, nonzero = hole.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twostream_autograd::Tensor;

use crate::data::augment::{draw_flip, hflip};
use crate::data::image_io::{load_image, load_mask};
use crate::data::mask::{generate_irregular_mask, is_binary, MaskBin};
use crate::data::pyramid::build_pyramids;
use crate::data::structure::structure_label;
use crate::error::{Error, Result};

pub const STRUCTURE_DIR: &str = "structures";

/// Image files of `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<Tensor<f64>>,
    pub structures: Vec<Tensor<f64>>,
    pub size: [usize; 2],
}

impl Dataset {
    pub fn from_dir(dir: &Path, size: [usize; 2]) -> Result<Self> {
        let paths = list_images(dir)?;
        if paths.is_empty() {
            return Err(Error::Input(format!("no images in {}", dir.display())));
        }
        let sidecar = dir.join(STRUCTURE_DIR);
        let mut names = Vec::with_capacity(paths.len());
        let mut images = Vec::with_capacity(paths.len());
        let mut structures = Vec::with_capacity(paths.len());
        for path in paths {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let image = load_image(&path, size)?;
            let side = sidecar.join(&name);
            let structure = if side.is_file() {
                load_image(&side, size)?
            } else {
                structure_label(&image)?
            };
            names.push(name);
            images.push(image);
            structures.push(structure);
        }
        Ok(Self {
            names,
            images,
            structures,
            size,
        })
    }

    /// In-memory dataset with computed structure labels.
    pub fn from_images(images: Vec<Tensor<f64>>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("empty dataset".into()))?
            .shape();
        let size = [first.h(), first.w()];
        let mut structures = Vec::with_capacity(images.len());
        for img in &images {
            let s = img.shape();
            if s.n() != 1 || s.c() != 3 || [s.h(), s.w()] != size {
                return Err(Error::Input(format!("image {s:?} in a {size:?} dataset")));
            }
            structures.push(structure_label(img)?);
        }
        Ok(Self {
            names: (0..images.len()).map(|i| format!("img_{i:03}")).collect(),
            images,
            structures,
            size,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Where training and evaluation masks come from.
#[derive(Debug, Clone)]
pub enum MaskSource {
    /// Brush-stroke masks; each sample draws a bin uniformly.
    Generated(Vec<MaskBin>),
    /// External masks; each sample draws one uniformly.
    Files(Vec<Tensor<f64>>),
    /// One fixed mask per dataset image.
    Fixed(Vec<Tensor<f64>>),
}

impl MaskSource {
    pub fn from_dir(dir: &Path, size: [usize; 2]) -> Result<Self> {
        let paths = list_images(dir)?;
        if paths.is_empty() {
            return Err(Error::Input(format!("no masks in {}", dir.display())));
        }
        let masks = paths.iter().map(|p| load_mask(p, size)).collect::<Result<Vec<_>>>()?;
        Ok(MaskSource::Files(masks))
    }

    pub fn mask(&self, rng: &mut ChaCha8Rng, index: usize, size: [usize; 2]) -> Result<Tensor<f64>> {
        let m = match self {
            MaskSource::Generated(bins) => {
                if bins.is_empty() {
                    return Err(Error::Config("no mask bins".into()));
                }
                let bin = bins[rng.gen_range(0..bins.len())];
                generate_irregular_mask(rng, size, &bin)?
            }
            MaskSource::Files(masks) => masks[rng.gen_range(0..masks.len())].clone(),
            MaskSource::Fixed(masks) => masks
                .get(index)
                .ok_or_else(|| Error::Input(format!("no fixed mask for sample {index}")))?
                .clone(),
        };
        let s = m.shape();
        if [s.h(), s.w()] != size || !is_binary(&m) {
            return Err(Error::Input(format!("mask {s:?} for images of {size:?}")));
        }
        Ok(m)
    }
}

/// One prepared training example, all tensors with batch size 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub structure: Tensor<f64>,
    pub image_pyramid: Vec<Tensor<f64>>,
    pub structure_pyramid: Vec<Tensor<f64>>,
}

impl ImageSample {
    pub fn new(image: Tensor<f64>, mask: Tensor<f64>, structure: Tensor<f64>, levels: usize) -> Result<Self> {
        let (image_pyramid, structure_pyramid) = build_pyramids(&image, &structure, levels)?;
        Ok(Self {
            image,
            mask,
            structure,
            image_pyramid,
            structure_pyramid,
        })
    }

    pub fn flipped(&self) -> Self {
        Self {
            image: hflip(&self.image),
            mask: hflip(&self.mask),
            structure: hflip(&self.structure),
            image_pyramid: self.image_pyramid.iter().map(hflip).collect(),
            structure_pyramid: self.structure_pyramid.iter().map(hflip).collect(),
        }
    }
}

/// Flip with probability one half, identically across the whole sample.
pub fn augment(rng: &mut ChaCha8Rng, sample: ImageSample) -> ImageSample {
    if draw_flip(rng) {
        sample.flipped()
    } else {
        sample
    }
}

/// Prepares dataset item `index` with randomness drawn only from `seed`.
pub fn make_sample(
    ds: &Dataset,
    masks: &MaskSource,
    index: usize,
    seed: u64,
    levels: usize,
    flip: bool,
) -> Result<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = masks.mask(&mut rng, index, ds.size)?;
    let sample = ImageSample::new(ds.images[index].clone(), mask, ds.structures[index].clone(), levels)?;
    Ok(if flip { augment(&mut rng, sample) } else { sample })
}

/// Samples stacked along the batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub image: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub structure: Tensor<f64>,
    pub image_pyramid: Vec<Tensor<f64>>,
    pub structure_pyramid: Vec<Tensor<f64>>,
}

impl Batch {
    pub fn collate(samples: &[ImageSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let cat = |f: &dyn Fn(&ImageSample) -> &Tensor<f64>| -> Result<Tensor<f64>> {
            let parts: Vec<&Tensor<f64>> = samples.iter().map(f).collect();
            Ok(Tensor::cat_batch(&parts)?)
        };
        let levels = samples[0].image_pyramid.len();
        let mut image_pyramid = Vec::with_capacity(levels);
        let mut structure_pyramid = Vec::with_capacity(levels);
        for l in 0..levels {
            image_pyramid.push(cat(&|s| &s.image_pyramid[l])?);
            structure_pyramid.push(cat(&|s| &s.structure_pyramid[l])?);
        }
        Ok(Self {
            image: cat(&|s| &s.image)?,
            mask: cat(&|s| &s.mask)?,
            structure: cat(&|s| &s.structure)?,
            image_pyramid,
            structure_pyramid,
        })
    }

    pub fn len(&self) -> usize {
        self.image.shape().n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mask::hole_ratio;
    use crate::data::synthetic::synthetic_image;

    fn tiny() -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Dataset::from_images((0..3).map(|_| synthetic_image(&mut rng, [16, 16])).collect()).unwrap()
    }

    #[test]
    fn samples_are_deterministic_and_consistent() {
        let ds = tiny();
        let src = MaskSource::Generated(vec![MaskBin::new(0.1, 0.2).unwrap()]);
        let a = make_sample(&ds, &src, 1, 77, 3, true).unwrap();
        let b = make_sample(&ds, &src, 1, 77, 3, true).unwrap();
        assert_eq!(a, b);
        assert!((0.1..=0.2).contains(&hole_ratio(&a.mask)));
        assert_eq!(a.image_pyramid[0], a.image);
        assert_eq!(a.image_pyramid[2].shape().h(), 4);
        // flipped samples are flipped everywhere
        let plain = make_sample(&ds, &src, 1, 77, 3, false).unwrap();
        if a.image != plain.image {
            assert_eq!(a, plain.flipped());
        } else {
            assert_eq!(a, plain);
        }
    }

    #[test]
    fn collate_stacks() {
        let ds = tiny();
        let src = MaskSource::Generated(vec![MaskBin::new(0.1, 0.5).unwrap()]);
        let s: Vec<_> = (0..3).map(|i| make_sample(&ds, &src, i, i as u64, 2, false).unwrap()).collect();
        let b = Batch::collate(&s).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.structure_pyramid[1].shape().0, [3, 3, 8, 8]);
        assert!(Batch::collate(&[]).is_err());
    }
}
