//! Area-averaged ground-truth pyramids.

use twostream_autograd::{avg_pool2, Tensor};

use crate::error::{Error, Result};

/// `levels` images, level 1 at full resolution, each next level halving both
/// sides by 2x2 averaging.
pub fn build_pyramid(image: &Tensor<f64>, levels: usize) -> Result<Vec<Tensor<f64>>> {
    if levels == 0 {
        return Err(Error::Input("pyramid needs at least one level".into()));
    }
    let s = image.shape();
    let step = 1usize << (levels - 1);
    if s.h() % step != 0 || s.w() % step != 0 {
        return Err(Error::Input(format!(
            "{}x{} is not divisible by 2^{}",
            s.h(),
            s.w(),
            levels - 1
        )));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(image.clone());
    for _ in 1..levels {
        let next = avg_pool2(out.last().expect("nonempty"))?;
        out.push(next);
    }
    Ok(out)
}

pub fn build_pyramids(
    image: &Tensor<f64>,
    structure: &Tensor<f64>,
    levels: usize,
) -> Result<(Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
    Ok((build_pyramid(image, levels)?, build_pyramid(structure, levels)?))
}
