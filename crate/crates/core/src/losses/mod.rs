//! Pixel-space and feature-space reconstruction losses.
//!
//! Both are a plain sum of squared differences averaged over the batch only:
//!
//! ```text
//! pixel(r, x)            = (1/B) * sum_b ||r_b - x_b||^2
//! perceptual_j(r, x)     = (1/B) * sum_b ||phi_j(r_b) - phi_j(x_b)||^2
//! ```
//!
//! There is no 1/2 and no per-element mean, so the learning rate carries the
//! whole scale of the update.

mod extractor;

use std::fmt;

pub use extractor::{canonical_tap, load_extractor, ExtractorSource, FeatureExtractor, MAX_DEPTH, VGG_BASE_WIDTH};

use crate::error::{Error, Result};
use crate::tensorcore::{Graph, Scalar, Tensor, Var};

/// Which loss drives training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LossSpec {
    Pixel,
    Perceptual { tap: String, extractor: ExtractorSource },
}

impl LossSpec {
    pub fn tap(&self) -> Option<&str> {
        match self {
            LossSpec::Pixel => None,
            LossSpec::Perceptual { tap, .. } => Some(tap),
        }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSpec::Pixel => f.write_str("pixel"),
            LossSpec::Perceptual { tap, extractor } => write!(f, "perceptual(tap={tap}, extractor={extractor})"),
        }
    }
}

/// A loss ready to evaluate: the extractor is loaded and cut after the tap.
#[derive(Clone, Debug)]
pub enum Loss<T: Scalar = f32> {
    Pixel,
    Perceptual { tap: String, extractor: FeatureExtractor<T> },
}

impl<T: Scalar> Loss<T> {
    pub fn from_spec(spec: &LossSpec) -> Result<Self> {
        match spec {
            LossSpec::Pixel => Ok(Loss::Pixel),
            LossSpec::Perceptual { tap, extractor } => {
                let tap = canonical_tap(tap);
                let ex = load_extractor::<T>(extractor)?.truncated(&tap)?;
                Ok(Loss::Perceptual { tap, extractor: ex })
            }
        }
    }

    /// Spatial divisibility the loss imposes on its inputs.
    pub fn pool_factor(&self) -> Result<usize> {
        match self {
            Loss::Pixel => Ok(1),
            Loss::Perceptual { tap, extractor } => extractor.pool_factor(tap),
        }
    }

    /// Records the loss of `recon` against the constant `label` on `g`.
    pub fn apply(&self, g: &mut Graph<T>, recon: Var, label: &Tensor<T>) -> Result<Var> {
        match self {
            Loss::Pixel => {
                let l = g.input(label.clone());
                pixel_loss(g, recon, l)
            }
            Loss::Perceptual { tap, extractor } => perceptual_loss(g, extractor, tap, recon, label),
        }
    }

    /// Loss value outside of any training graph.
    pub fn value(&self, recon: &Tensor<T>, label: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new();
        let r = g.input(recon.clone());
        let l = self.apply(&mut g, r, label)?;
        Ok(g.value(l).data()[0].as_f64())
    }
}

/// Sum of squared differences over each item, averaged over the batch.
pub fn pixel_loss<T: Scalar>(g: &mut Graph<T>, recon: Var, label: Var) -> Result<Var> {
    let (rs, ls) = (g.shape(recon), g.shape(label));
    if rs != ls {
        return Err(Error::shape(format!("loss of {rs} against label {ls}")));
    }
    let d = g.sub(recon, label)?;
    let ss = g.sum_squares(d);
    Ok(g.scale(ss, 1.0 / rs.n as f64))
}

/// [`pixel_loss`] between tap features of `recon` and `label`. The label's
/// features are computed outside the graph, so no gradient reaches them.
pub fn perceptual_loss<T: Scalar>(
    g: &mut Graph<T>,
    extractor: &FeatureExtractor<T>,
    tap: &str,
    recon: Var,
    label: &Tensor<T>,
) -> Result<Var> {
    let rs = g.shape(recon);
    if rs != label.shape() {
        return Err(Error::shape(format!("loss of {rs} against label {}", label.shape())));
    }
    let target = extractor.extract(label, tap)?;
    let target = g.input(target);
    let feats = extractor.extract_in(g, recon, tap)?;
    pixel_loss(g, feats, target)
}

/// Feature map of `image` at `tap`.
pub fn feature_extract<T: Scalar>(extractor: &FeatureExtractor<T>, image: &Tensor<T>, tap: &str) -> Result<Tensor<T>> {
    extractor.extract(image, tap)
}
