//! Forward passes of a loaded generator with every output the tools need.

use twostream_autograd::{Graph, Real, Tensor};

use crate::error::{Error, Result};
use crate::metrics::Inpainter;
use crate::network::ForwardOptions;
use crate::params::Bound;
use crate::training::InferenceModel;

/// Outputs of one forward pass, in [-1, 1] except the gate maps.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Raw full-resolution detailed image.
    pub raw: Tensor<f64>,
    pub composited: Tensor<f64>,
    /// Full-resolution structure image; absent without a structure stream.
    pub structure: Option<Tensor<f64>>,
    /// Detailed images per level, full resolution first.
    pub detailed_pyramid: Vec<Tensor<f64>>,
    pub structure_pyramid: Vec<Tensor<f64>>,
    /// Gate maps per level, level 1 first; empty without gated units.
    pub gates: Vec<Tensor<f64>>,
}

impl<T: Real> InferenceModel<T> {
    pub fn input_size(&self) -> [usize; 2] {
        self.config.network.input_size
    }

    pub fn predict(&self, image: &Tensor<f64>, mask: &Tensor<f64>) -> Result<Prediction> {
        self.predict_with(image, mask, ForwardOptions::default())
    }

    pub fn predict_with(&self, image: &Tensor<f64>, mask: &Tensor<f64>, opts: ForwardOptions) -> Result<Prediction> {
        let [h, w] = self.input_size();
        let (s, m) = (image.shape(), mask.shape());
        if s.c() != 3 || s.h() != h || s.w() != w || m.c() != 1 || m.h() != h || m.w() != w || m.n() != s.n() {
            return Err(Error::Input(format!(
                "image {s:?} and mask {m:?} do not match the model's {h}x{w} input"
            )));
        }
        let mut g = Graph::<T>::new();
        let p = Bound::new(&mut g, &self.params, false);
        let (iv, mv) = (g.constant(image.cast()), g.constant(mask.cast()));
        let r = self.generator.forward(&mut g, &p, iv, mv, opts)?;
        let get = |v| g.value(v).cast::<f64>();
        Ok(Prediction {
            raw: get(r.final_image),
            composited: get(r.composited),
            structure: r.structure_image().map(get),
            detailed_pyramid: r.detailed_pyramid().iter().map(|&v| get(v)).collect(),
            structure_pyramid: r.structure_pyramid().iter().map(|&v| get(v)).collect(),
            gates: r.gate_maps().iter().map(|&v| get(v)).collect(),
        })
    }
}

impl<T: Real> Inpainter for InferenceModel<T> {
    fn inpaint(&self, image: &Tensor<f64>, mask: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.predict(image, mask)?.raw)
    }
}
