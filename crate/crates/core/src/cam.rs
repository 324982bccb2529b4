//! Class-activation heatmaps: GradCAM, GradCAM++ and ScoreCAM.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Backbone, CamLayer, Classifier, Label};
use crate::nn::{softmax, FeatureTensor};
use crate::raster::{resize_bilinear_planar, save_png_gray, write_atomic, Grid};

/// Side length heatmaps are upsampled to by default (raw image size).
pub const HEATMAP_SIZE: usize = 640;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamMethod {
    GradCam,
    GradCamPp,
    ScoreCam,
}

impl CamMethod {
    pub const ALL: [CamMethod; 3] = [CamMethod::GradCam, CamMethod::GradCamPp, CamMethod::ScoreCam];

    pub fn as_str(self) -> &'static str {
        match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPp => "gradcampp",
            CamMethod::ScoreCam => "scorecam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace("++", "pp").replace(['-', '_'], "").as_str() {
            "gradcam" => Ok(CamMethod::GradCam),
            "gradcampp" | "gradcamplusplus" => Ok(CamMethod::GradCamPp),
            "scorecam" => Ok(CamMethod::ScoreCam),
            _ => Err(Error::invalid(format!("unknown CAM method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CamOptions {
    pub layer: CamLayer,
    pub target: Label,
    /// Output side length; the map is bilinearly upsampled to it.
    pub output_size: usize,
}

impl Default for CamOptions {
    fn default() -> Self {
        Self {
            layer: CamLayer::BackboneLastConv,
            target: Label::Hotspot,
            output_size: HEATMAP_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamHeatmap {
    /// Values in [0, 1]; either all zero or spanning exactly 0..=1.
    pub values: Grid,
    pub method: CamMethod,
    pub target_class: Label,
    pub layer: CamLayer,
    /// Per-channel weights used to combine the activations.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub method: CamMethod,
    pub class: Label,
    pub layer: CamLayer,
    pub width: usize,
    pub height: usize,
}

impl CamHeatmap {
    /// Grayscale PNG plus a `.json` sidecar next to it.
    pub fn save(&self, png: &Path) -> Result<()> {
        save_png_gray(png, &self.values.to_gray8())?;
        let side = HeatmapSidecar {
            method: self.method,
            class: self.target_class,
            layer: self.layer,
            width: self.values.width,
            height: self.values.height,
        };
        write_atomic(&png.with_extension("json"), serde_json::to_string_pretty(&side)?.as_bytes())
    }
}

/// ReLU of the weighted channel sum at feature resolution.
pub fn weighted_sum(activations: &FeatureTensor, weights: &[f64]) -> Grid {
    let mut g = Grid::new(activations.width, activations.height, 0.0);
    for (c, w) in weights.iter().enumerate() {
        for (o, a) in g.data.iter_mut().zip(activations.plane(c)) {
            *o += w * a;
        }
    }
    for v in &mut g.data {
        *v = v.max(0.0);
    }
    g
}

/// Upsample to `size`×`size` and min-max normalise.
pub fn finish_map(map: &Grid, size: usize) -> Grid {
    map.resize_bilinear(size, size).normalized()
}

fn check_finite(t: &FeatureTensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contain non-finite values")))
    }
}

fn activations_and_gradient<B: Backbone>(
    model: &Classifier<B>,
    input: &FeatureTensor,
    opts: &CamOptions,
) -> Result<(FeatureTensor, FeatureTensor)> {
    let cache = model.forward_cached(input)?;
    let grad = model.layer_gradient(&cache, opts.layer, opts.target);
    let act = match opts.layer {
        CamLayer::BackboneLastConv => cache.features,
        CamLayer::AbmOutput => cache.abm_out,
    };
    check_finite(&act, "activations")?;
    check_finite(&grad, "gradients")?;
    Ok((act, grad))
}

/// Channel weight = spatial mean of the target-score gradient.
pub fn grad_cam_weights(gradient: &FeatureTensor) -> Vec<f64> {
    let n = gradient.plane_len() as f64;
    (0..gradient.channels)
        .map(|c| gradient.plane(c).iter().sum::<f64>() / n)
        .collect()
}

/// Closed-form GradCAM++ weights from first-order gradients of the score.
/// Pixels with zero gradient (or a vanishing denominator) get α = 0.
pub fn grad_cam_pp_weights(activations: &FeatureTensor, gradient: &FeatureTensor) -> Vec<f64> {
    (0..gradient.channels)
        .map(|c| {
            let a = activations.plane(c);
            let g = gradient.plane(c);
            let act_sum: f64 = a.iter().sum();
            g.iter()
                .map(|&gi| {
                    let g2 = gi * gi;
                    let denom = 2.0 * g2 + act_sum * g2 * gi;
                    if gi == 0.0 || denom.abs() < 1e-300 {
                        0.0
                    } else {
                        g2 / denom * gi.max(0.0)
                    }
                })
                .sum()
        })
        .collect()
}

pub fn grad_cam<B: Backbone>(model: &Classifier<B>, input: &FeatureTensor, opts: &CamOptions) -> Result<CamHeatmap> {
    let (act, grad) = activations_and_gradient(model, input, opts)?;
    let weights = grad_cam_weights(&grad);
    Ok(CamHeatmap {
        values: finish_map(&weighted_sum(&act, &weights), opts.output_size),
        method: CamMethod::GradCam,
        target_class: opts.target,
        layer: opts.layer,
        weights,
    })
}

pub fn grad_cam_pp<B: Backbone>(model: &Classifier<B>, input: &FeatureTensor, opts: &CamOptions) -> Result<CamHeatmap> {
    let (act, grad) = activations_and_gradient(model, input, opts)?;
    let weights = grad_cam_pp_weights(&act, &grad);
    Ok(CamHeatmap {
        values: finish_map(&weighted_sum(&act, &weights), opts.output_size),
        method: CamMethod::GradCamPp,
        target_class: opts.target,
        layer: opts.layer,
        weights,
    })
}

/// Per-channel increase of the target probability when the input is masked
/// by that channel's normalised activation, relative to an all-zero input.
pub fn score_cam_increases<B: Backbone>(
    model: &Classifier<B>,
    input: &FeatureTensor,
    activations: &FeatureTensor,
    target: Label,
) -> Result<Vec<f64>> {
    let zero = FeatureTensor::zeros(input.channels, input.height, input.width);
    let base = softmax(&model.logits(&zero)?)[target.index()];
    (0..activations.channels)
        .map(|c| {
            let plane = activations.plane(c);
            let up = resize_bilinear_planar(plane, activations.width, activations.height, 1, input.width, input.height);
            let mask = Grid::from_vec(input.width, input.height, up)?.normalized();
            let mut masked = input.clone();
            for ch in 0..masked.channels {
                for (v, m) in masked.plane_mut(ch).iter_mut().zip(&mask.data) {
                    *v *= m;
                }
            }
            Ok(softmax(&model.logits(&masked)?)[target.index()] - base)
        })
        .collect()
}

pub fn score_cam<B: Backbone>(model: &Classifier<B>, input: &FeatureTensor, opts: &CamOptions) -> Result<CamHeatmap> {
    model.check_input(input)?;
    let act = model.layer_activations(input, opts.layer)?;
    check_finite(&act, "activations")?;
    let weights = softmax(&score_cam_increases(model, input, &act, opts.target)?);
    Ok(CamHeatmap {
        values: finish_map(&weighted_sum(&act, &weights), opts.output_size),
        method: CamMethod::ScoreCam,
        target_class: opts.target,
        layer: opts.layer,
        weights,
    })
}

pub fn explain<B: Backbone>(
    method: CamMethod,
    model: &Classifier<B>,
    input: &FeatureTensor,
    opts: &CamOptions,
) -> Result<CamHeatmap> {
    match method {
        CamMethod::GradCam => grad_cam(model, input, opts),
        CamMethod::GradCamPp => grad_cam_pp(model, input, opts),
        CamMethod::ScoreCam => score_cam(model, input, opts),
    }
}
