//! Counting and count-error metrics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{AnnotatedScene, RoiMask};
use crate::map::ValueMap;
use crate::model::{CombineMode, MultiScaleOutputs, PacnnModel};
use crate::scalar::Real;
use crate::train::{image_tensor, Normalization};

/// MAE and root-mean-square count error over `n` scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountMetrics {
    pub mae: f64,
    /// Root of the mean squared count error.
    pub mse: f64,
    pub n: usize,
}

impl CountMetrics {
    /// Reduction over sorted errors, so the result does not depend on the
    /// order of the pairs.
    pub fn from_counts(predicted: &[f64], actual: &[f64]) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::Shape(format!("{} predictions for {} scenes", predicted.len(), actual.len())));
        }
        if predicted.is_empty() {
            return Err(Error::InsufficientData("no scenes to evaluate".into()));
        }
        let mut abs: Vec<f64> = predicted.iter().zip(actual).map(|(p, a)| (p - a).abs()).collect();
        abs.sort_by(f64::total_cmp);
        let n = abs.len() as f64;
        let mae = abs.iter().sum::<f64>() / n;
        let mse = (abs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        Ok(CountMetrics { mae, mse, n: abs.len() })
    }
}

/// Sum of `map` inside `roi` (everywhere when `None`), divided by
/// `density_scale`.
pub fn count_from_density<T: Real>(map: &ValueMap<T>, roi: Option<&RoiMask>, density_scale: f64) -> Result<f64> {
    let sum = match roi {
        None => map.total(),
        Some(r) => {
            if r.width != map.width || r.height != map.height {
                return Err(Error::Shape(format!(
                    "roi {}x{} vs map {}x{}",
                    r.width, r.height, map.width, map.height
                )));
            }
            map.values.iter().zip(&r.inside).filter(|(_, &m)| m).map(|(v, _)| v.as_f64()).sum()
        }
    };
    Ok(sum / density_scale)
}

/// ROI reduced by `factor` and padded with "outside" to `(w, h)`.
pub fn roi_for_output(roi: &RoiMask, factor: usize, w: usize, h: usize) -> RoiMask {
    let small = roi.downsample(factor);
    let inside = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| x < small.width && y < small.height && small.contains(x, y))
        .collect();
    RoiMask { width: w, height: h, inside }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrediction {
    pub id: String,
    pub predicted: f64,
    pub actual: f64,
}

/// Whole-image inference for one scene: outputs and predicted count.
pub fn predict(
    model: &PacnnModel<f32>,
    scene: &AnnotatedScene,
    mode: CombineMode,
    norm: &Normalization,
) -> Result<(MultiScaleOutputs<f32>, f64)> {
    let out = model.forward(&image_tensor(scene)?, mode)?;
    let roi = scene.roi.as_ref().map(|r| roi_for_output(r, 8, out.d_e.width, out.d_e.height));
    let count = count_from_density(&out.d_e, roi.as_ref(), norm.density_scale)?;
    Ok((out, count))
}

/// Metrics over a dataset, plus per-scene predictions in input order.
pub fn evaluate(
    model: &PacnnModel<f32>,
    scenes: &[AnnotatedScene],
    mode: CombineMode,
    norm: &Normalization,
) -> Result<(CountMetrics, Vec<ScenePrediction>)> {
    if scenes.is_empty() {
        return Err(Error::InsufficientData("empty evaluation set".into()));
    }
    let preds: Vec<ScenePrediction> = scenes
        .par_iter()
        .map(|s| {
            let (_, predicted) = predict(model, s, mode, norm)?;
            Ok(ScenePrediction { id: s.id.clone(), predicted, actual: s.count() as f64 })
        })
        .collect::<Result<_>>()?;
    let p: Vec<f64> = preds.iter().map(|r| r.predicted).collect();
    let a: Vec<f64> = preds.iter().map(|r| r.actual).collect();
    Ok((CountMetrics::from_counts(&p, &a)?, preds))
}
