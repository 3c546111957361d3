//! Gaussian class activation mapping.
//!
//! For one target score and one layer with activations `A_k` and gradients
//! `G_k = ∂S/∂A_k`, each usable feature map `k` contributes
//!
//! ```text
//! α_k · A_k ⊙ mask_k
//! ```
//!
//! where `α_k` is the mean of `G_k`, and `mask_k` is a Gaussian centered on
//! the cell the gradient points at, with spread
//!
//! ```text
//! σ_k = ln|mean G_k| · ln √(HW / hw) · 3 / ⌊(√(hw) − 1) / 2⌋
//! ```
//!
//! Maps with `α_k ≥ 0` form the positive part, the rest the negative part;
//! the negative sum is subtracted from the positive sum, clipped at zero,
//! upsampled to the image and normalized.

use serde::{Deserialize, Serialize};

use crate::detector::SourceCell;
use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, normalize01, Tensor};

/// Smallest spread a mask may have; a degenerate mask is a delta at the center.
pub const MIN_SIGMA: f64 = 1e-3;

/// `∂S/∂A_k` for every feature map of one layer, `[K, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    pub values: Tensor,
    pub layer_id: String,
    pub target: Option<SourceCell>,
}

/// Activations `A_k` of one layer, `[K, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapStack {
    pub values: Tensor,
    pub layer_id: String,
}

/// Normalized Gaussian weights over a feature map, peak 1 at `center`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMask {
    pub values: Tensor,
    pub center: (usize, usize),
    pub sigma: f64,
}

/// Image-sized explanation in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor,
    pub target: Option<SourceCell>,
    pub layers: Vec<String>,
    /// Set when no feature map carried gradient signal; `values` is then all zeros.
    pub no_signal: bool,
}

impl SaliencyMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            values: Tensor::zeros(vec![h, w]),
            target: None,
            layers: Vec::new(),
            no_signal: true,
        }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// How the object's center cell is found on a gradient map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// The gradient has exactly one nonzero cell (1×1 conv head).
    #[default]
    OneStage,
    /// Argmax of `|G|`, for heads whose gradient spreads over many cells.
    TwoStage,
}

impl std::str::FromStr for CenterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_stage" => Ok(Self::OneStage),
            "two_stage" => Ok(Self::TwoStage),
            _ => Err(Error::InvalidInput(format!("unknown mode `{s}`"))),
        }
    }
}

/// Feature-map weight: gradient mean (default) or plain sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    #[default]
    Mean,
    Sum,
}

/// What gets subtracted for the negative part.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePart {
    /// `P − Σ_{k2} mask ⊙ α_k A_k`, with `α_k < 0` kept signed.
    #[default]
    Signed,
    /// `P − Σ_{k2} mask ⊙ |α_k| A_k`, i.e. the plain signed GradCAM sum.
    Magnitude,
}

/// Two-stage center search: per feature map or once over `Σ_k |G_k|`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterSearch {
    #[default]
    PerFeatureMap,
    Aggregated,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GcameOptions {
    pub mode: CenterMode,
    pub alpha: AlphaRule,
    pub negative: NegativePart,
    pub center_search: CenterSearch,
}

impl GcameOptions {
    pub fn with_mode(mode: CenterMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }
}

/// Center cell `(row, col)` of feature map `k`.
pub fn locate_center(grad: &GradientMap, mode: CenterMode, k: usize) -> Result<(usize, usize)> {
    let slice = grad.values.channel(k)?;
    locate_center_in(&slice, mode)
}

fn locate_center_in(slice: &Tensor, mode: CenterMode) -> Result<(usize, usize)> {
    let (_, w) = slice.dims2()?;
    match mode {
        CenterMode::OneStage => {
            let mut nonzero = slice.data().iter().enumerate().filter(|(_, &v)| v != 0.0);
            let first = nonzero.next().ok_or(Error::NoSignal)?.0;
            let extra = nonzero.count();
            if extra > 0 {
                return Err(Error::MultiCellSupport(extra + 1));
            }
            Ok((first / w, first % w))
        }
        CenterMode::TwoStage => {
            let mut best: Option<(usize, f32)> = None;
            for (idx, &v) in slice.data().iter().enumerate() {
                let a = v.abs();
                if a > 0.0 && best.map_or(true, |(_, b)| a > b) {
                    best = Some((idx, a));
                }
            }
            let (idx, _) = best.ok_or(Error::NoSignal)?;
            Ok((idx / w, idx % w))
        }
    }
}

/// Feature-map weight `α_k`: the mean of the gradient map.
pub fn compute_alpha(grad_k: &Tensor) -> f64 {
    let sum = grad_sum(grad_k);
    sum / grad_k.len() as f64
}

fn alpha_with(grad_k: &Tensor, rule: AlphaRule) -> f64 {
    match rule {
        AlphaRule::Mean => compute_alpha(grad_k),
        AlphaRule::Sum => grad_sum(grad_k),
    }
}

fn grad_sum(grad_k: &Tensor) -> f64 {
    grad_k.data().iter().map(|&g| g as f64).sum()
}

/// Splits feature-map indices by the sign of `α`: `(α ≥ 0, α < 0)`.
pub fn partition_feature_maps(alphas: &[f64]) -> (Vec<usize>, Vec<usize>) {
    (0..alphas.len()).partition(|&k| alphas[k] >= 0.0)
}

/// Gaussian spread for one feature map, in feature-map cells.
///
/// Uses natural logs; a non-positive result is reflected and floored at
/// [`MIN_SIGMA`]. Maps smaller than 3×3 get a kernel-size divisor of 1.
pub fn compute_sigma(grad_k: &Tensor, image_h: usize, image_w: usize) -> Result<f64> {
    let (h, w) = grad_k.dims2()?;
    let cells = (h * w) as f64;
    if h * w <= 1 {
        return Err(Error::InvalidInput(
            "sigma needs a feature map with more than one cell".into(),
        ));
    }
    let mean = compute_alpha(grad_k);
    if mean == 0.0 {
        return Err(Error::NoSignal);
    }
    let importance = mean.abs().ln();
    let scale = ((image_h * image_w) as f64 / cells).sqrt();
    let divisor = ((cells.sqrt() - 1.0) / 2.0).floor().max(1.0);
    let sigma = importance * scale.ln() * 3.0 / divisor;
    Ok(sigma.abs().max(MIN_SIGMA))
}

/// `exp(−(x² + y²) / 2σ²)` on an `h×w` grid centered at `center`, scaled so
/// the peak is exactly 1.
pub fn gaussian_mask(h: usize, w: usize, center: (usize, usize), sigma: f64) -> Result<GaussianMask> {
    let (ci, cj) = center;
    if ci >= h || cj >= w {
        return Err(Error::InvalidInput(format!(
            "mask center ({ci}, {cj}) outside {h}x{w} grid"
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    let denom = 2.0 * sigma * sigma;
    let raw: Vec<f64> = (0..h)
        .flat_map(|i| {
            (0..w).map(move |j| {
                let y = i as f64 - ci as f64;
                let x = j as f64 - cj as f64;
                (-(x * x + y * y) / denom).exp()
            })
        })
        .collect();
    let peak = raw[ci * w + cj];
    let values = Tensor::new(
        vec![h, w],
        raw.iter().map(|v| (v / peak) as f32).collect(),
    )?;
    Ok(GaussianMask {
        values,
        center,
        sigma,
    })
}

/// Per-feature-map breakdown of one layer, before upsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCam {
    /// `P − N` at feature-map resolution, before the ReLU.
    pub raw: Tensor,
    /// `(k, α_k, σ_k, center)` for every feature map that contributed.
    pub used: Vec<(usize, f64, f64, (usize, usize))>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

/// Weighted, masked feature-map sum for one layer at feature resolution.
pub fn layer_cam(
    features: &FeatureMapStack,
    grad: &GradientMap,
    image_h: usize,
    image_w: usize,
    options: &GcameOptions,
) -> Result<LayerCam> {
    let (k_count, h, w) = features.values.dims3()?;
    if grad.values.shape() != features.values.shape() {
        return Err(Error::Shape(format!(
            "features {:?} and gradients {:?} differ",
            features.values.shape(),
            grad.values.shape()
        )));
    }

    let aggregated_center = match (options.mode, options.center_search) {
        (CenterMode::TwoStage, CenterSearch::Aggregated) => {
            let mut acc = Tensor::zeros(vec![h, w]);
            for k in 0..k_count {
                let abs = grad.values.channel(k)?.map(f32::abs);
                acc = acc.add(&abs)?;
            }
            locate_center_in(&acc, CenterMode::TwoStage).ok()
        }
        _ => None,
    };

    let plane = h * w;
    let mut raw = vec![0.0f64; plane];
    let mut used = Vec::new();
    let (mut positive, mut negative) = (Vec::new(), Vec::new());
    for k in 0..k_count {
        let g = grad.values.channel(k)?;
        if g.data().iter().all(|&v| v == 0.0) {
            continue;
        }
        let alpha = alpha_with(&g, options.alpha);
        if alpha >= 0.0 {
            positive.push(k);
        } else {
            negative.push(k);
        }
        if alpha == 0.0 {
            continue;
        }
        let center = match aggregated_center {
            Some(c) => c,
            None => locate_center_in(&g, options.mode)?,
        };
        let (sigma, mask) = if plane == 1 {
            (f64::INFINITY, vec![1.0f64])
        } else {
            let sigma = compute_sigma(&g, image_h, image_w)?;
            let m = gaussian_mask(h, w, center, sigma)?;
            (sigma, m.values.data().iter().map(|&v| v as f64).collect())
        };
        let coeff = match (alpha < 0.0, options.negative) {
            // P − N with N = Σ α A (α < 0): the subtraction flips the sign.
            (true, NegativePart::Signed) => -alpha,
            (true, NegativePart::Magnitude) => alpha,
            (false, _) => alpha,
        };
        let a = &features.values.data()[k * plane..(k + 1) * plane];
        for ((r, &m), &av) in raw.iter_mut().zip(&mask).zip(a) {
            *r += coeff * m * av as f64;
        }
        used.push((k, alpha, sigma, center));
    }
    Ok(LayerCam {
        raw: Tensor::new(vec![h, w], raw.into_iter().map(|v| v as f32).collect())?,
        used,
        positive,
        negative,
    })
}

/// One layer's saliency at image resolution.
pub fn combine_saliency(
    features: &FeatureMapStack,
    grad: &GradientMap,
    image_h: usize,
    image_w: usize,
    options: &GcameOptions,
) -> Result<SaliencyMap> {
    let cam = layer_cam(features, grad, image_h, image_w, options)?;
    if cam.used.is_empty() {
        let mut s = SaliencyMap::zeros(image_h, image_w);
        s.target = grad.target;
        return Ok(s);
    }
    let rectified = cam.raw.map(|v| v.max(0.0));
    let up = bilinear_resize(&rectified, image_h, image_w)?;
    Ok(SaliencyMap {
        values: normalize01(&up),
        target: grad.target,
        layers: vec![features.layer_id.clone()],
        no_signal: false,
    })
}

/// Anything that can hand out `(A, ∂S/∂A)` for a named layer, already bound
/// to one target score.
pub trait LayerSource {
    /// `(H, W)` of the input image.
    fn image_size(&self) -> (usize, usize);

    fn layer_maps(&self, layer: &str) -> Result<(FeatureMapStack, GradientMap)>;
}

/// Full explanation: per-layer saliency summed at image resolution, then
/// normalized. Layers without gradient signal contribute nothing.
pub fn explain<S: LayerSource + ?Sized>(
    source: &S,
    layers: &[String],
    options: &GcameOptions,
) -> Result<SaliencyMap> {
    if layers.is_empty() {
        return Err(Error::InvalidInput("no target layers given".into()));
    }
    let (img_h, img_w) = source.image_size();
    let mut total: Option<Tensor> = None;
    let mut contributing = Vec::new();
    let mut target = None;
    for layer in layers {
        let (features, grad) = source.layer_maps(layer)?;
        target = target.or(grad.target);
        let s = combine_saliency(&features, &grad, img_h, img_w, options)?;
        if s.no_signal {
            continue;
        }
        contributing.push(layer.clone());
        total = Some(match total {
            Some(t) => t.add(&s.values)?,
            None => s.values,
        });
    }
    match total {
        Some(t) => Ok(SaliencyMap {
            values: normalize01(&t),
            target,
            layers: contributing,
            no_signal: false,
        }),
        None => {
            log::warn!("no target layer carried gradient signal; returning an empty map");
            let mut s = SaliencyMap::zeros(img_h, img_w);
            s.target = target;
            Ok(s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack(k: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![k, h, w], data).unwrap()
    }

    fn grad_map(values: Tensor) -> GradientMap {
        GradientMap {
            values,
            layer_id: "l".into(),
            target: None,
        }
    }

    fn feats(values: Tensor) -> FeatureMapStack {
        FeatureMapStack {
            values,
            layer_id: "l".into(),
        }
    }

    fn single_cell(h: usize, w: usize, at: (usize, usize), v: f32) -> Tensor {
        Tensor::from_fn_2d(h, w, |i, j| if (i, j) == at { v } else { 0.0 })
    }

    #[test]
    fn locate_single_nonzero() {
        let g = single_cell(6, 6, (3, 4), 0.7);
        let gm = grad_map(stack(1, 6, 6, g.into_data()));
        assert_eq!(locate_center(&gm, CenterMode::OneStage, 0).unwrap(), (3, 4));
        assert_eq!(locate_center(&gm, CenterMode::TwoStage, 0).unwrap(), (3, 4));
    }

    #[test]
    fn locate_two_stage_tie_is_row_major_first() {
        let mut d = vec![0.0; 9];
        d[1] = -2.0; // (0,1)
        d[6] = 2.0; // (2,0)
        d[4] = 1.0;
        let gm = grad_map(stack(1, 3, 3, d));
        assert_eq!(locate_center(&gm, CenterMode::TwoStage, 0).unwrap(), (0, 1));
    }

    #[test]
    fn locate_one_stage_rejects_spread_and_empty() {
        let mut d = vec![0.0; 9];
        d[0] = 1.0;
        d[8] = 1.0;
        let gm = grad_map(stack(1, 3, 3, d));
        assert!(matches!(
            locate_center(&gm, CenterMode::OneStage, 0),
            Err(Error::MultiCellSupport(2))
        ));
        let empty = grad_map(stack(1, 3, 3, vec![0.0; 9]));
        assert!(matches!(
            locate_center(&empty, CenterMode::OneStage, 0),
            Err(Error::NoSignal)
        ));
        assert!(matches!(
            locate_center(&empty, CenterMode::TwoStage, 0),
            Err(Error::NoSignal)
        ));
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(compute_alpha(&Tensor::filled(vec![2, 2], 1.0)), 1.0);
        let sym = Tensor::new(vec![2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(compute_alpha(&sym), 0.0);
        let one = single_cell(8, 8, (2, 5), 6.4);
        assert!((compute_alpha(&one) - 0.1).abs() < 1e-7);
        assert!((alpha_with(&one, AlphaRule::Sum) - 6.4).abs() < 1e-6);
    }

    #[test]
    fn partition_examples() {
        assert_eq!(
            partition_feature_maps(&[0.5, -0.2, 0.0]),
            (vec![0, 2], vec![1])
        );
        assert_eq!(partition_feature_maps(&[1.0, 2.0]), (vec![0, 1], vec![]));
        assert_eq!(partition_feature_maps(&[-1.0, -2.0]), (vec![], vec![0, 1]));
    }

    #[test]
    fn sigma_worked_example() {
        // 64x64 image, 8x8 map, single cell 64e -> mean e, R = 1, S = 8, divisor 3.
        let g = single_cell(8, 8, (4, 4), 64.0 * std::f32::consts::E);
        let sigma = compute_sigma(&g, 64, 64).unwrap();
        assert!((sigma - 8f64.ln()).abs() < 1e-4, "{sigma}");
        assert!((sigma - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn sigma_degenerate_cases_clamp() {
        let unit_mean = Tensor::filled(vec![8, 8], 1.0);
        assert_eq!(compute_sigma(&unit_mean, 64, 64).unwrap(), MIN_SIGMA);
        let g = single_cell(8, 8, (0, 0), 3.0);
        assert_eq!(compute_sigma(&g, 8, 8).unwrap(), MIN_SIGMA);
        assert!(matches!(
            compute_sigma(&Tensor::zeros(vec![8, 8]), 64, 64),
            Err(Error::NoSignal)
        ));
        assert!(compute_sigma(&Tensor::filled(vec![1, 1], 2.0), 8, 8).is_err());
        // 2x2 maps have a zero kernel-size divisor; it is raised to 1.
        let small = Tensor::filled(vec![2, 2], std::f32::consts::E);
        let s = compute_sigma(&small, 4, 4).unwrap();
        assert!((s - 2f64.ln() * 3.0).abs() < 1e-5);
    }

    #[test]
    fn mask_analytics() {
        let m = gaussian_mask(7, 7, (3, 3), 1.0).unwrap();
        assert_eq!(m.values.at2(3, 3), 1.0);
        assert!((m.values.at2(3, 4) as f64 - (-0.5f64).exp()).abs() < 1e-6);
        assert!((m.values.at2(2, 3) as f64 - 0.6065).abs() < 1e-4);
        assert!((m.values.at2(4, 4) as f64 - (-1f64).exp()).abs() < 1e-6);
        assert!((m.values.at2(4, 4) as f64 - 0.3679).abs() < 1e-4);
        assert!(gaussian_mask(3, 3, (3, 0), 1.0).is_err());
        assert!(gaussian_mask(3, 3, (1, 1), 0.0).is_err());
    }

    #[test]
    fn tiny_sigma_is_a_delta() {
        let m = gaussian_mask(4, 4, (1, 2), MIN_SIGMA).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if (i, j) == (1, 2) { 1.0 } else { 0.0 };
                assert_eq!(m.values.at2(i, j), expect);
            }
        }
    }

    #[test]
    fn all_zero_gradients_give_empty_saliency() {
        let a = feats(Tensor::filled(vec![2, 4, 4], 1.0));
        let g = grad_map(Tensor::zeros(vec![2, 4, 4]));
        let s = combine_saliency(&a, &g, 16, 16, &GcameOptions::default()).unwrap();
        assert!(s.no_signal);
        assert!(s.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bump_peaks_at_detection_cell() {
        // One feature map shaped like the mask itself, alpha > 0, center (2, 5).
        let (h, w) = (8, 8);
        let g = single_cell(h, w, (2, 5), 30.0);
        let sigma = compute_sigma(&g, 64, 64).unwrap();
        let bump = gaussian_mask(h, w, (2, 5), sigma).unwrap().values;
        let s = combine_saliency(
            &feats(stack(1, h, w, bump.into_data())),
            &grad_map(stack(1, h, w, g.into_data())),
            64,
            64,
            &GcameOptions::default(),
        )
        .unwrap();
        // Corner-aligned upsampling places cell (i, j) at pixel (9i, 9j).
        let argmax = s
            .values
            .data()
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0;
        assert_eq!((argmax / 64, argmax % 64), (18, 45));
        assert_eq!(s.values.at2(18, 45), 1.0);
    }

    #[test]
    fn sign_flip_under_each_negative_rule() {
        let (h, w) = (5, 5);
        let a = Tensor::new(
            vec![2, h, w],
            (0..2 * h * w).map(|i| ((i * 13) % 7) as f32 / 7.0).collect(),
        )
        .unwrap();
        let mut g = Tensor::zeros(vec![2, h, w]);
        g.set3(0, 2, 2, 4.0);
        g.set3(1, 2, 2, -9.0);
        let neg_g = g.map(|v| -v);

        let signed = GcameOptions::default();
        let before = layer_cam(&feats(a.clone()), &grad_map(g.clone()), 25, 25, &signed).unwrap();
        let after = layer_cam(&feats(a.clone()), &grad_map(neg_g.clone()), 25, 25, &signed).unwrap();
        assert_eq!(before.positive, after.negative);
        assert_eq!(before.negative, after.positive);
        // Subtracting the signed negative part makes the raw map sign-blind.
        assert_eq!(before.raw, after.raw);

        let magnitude = GcameOptions {
            negative: NegativePart::Magnitude,
            ..GcameOptions::default()
        };
        let before = layer_cam(&feats(a.clone()), &grad_map(g), 25, 25, &magnitude).unwrap();
        let after = layer_cam(&feats(a.clone()), &grad_map(neg_g), 25, 25, &magnitude).unwrap();
        for (x, y) in before.raw.data().iter().zip(after.raw.data()) {
            assert!((x + y).abs() <= 1e-6 * x.abs().max(1.0));
        }
        let relu_before = before.raw.map(|v| v.max(0.0));
        let relu_after = after.raw.map(|v| v.max(0.0));
        assert_ne!(relu_before, relu_after);
    }

    #[test]
    fn one_by_one_map_matches_brute_force() {
        for (alpha_g, act) in [(0.3f32, 2.0f32), (-0.3, 2.0), (0.5, 0.0), (-1.5, 0.25)] {
            let a = feats(stack(1, 1, 1, vec![act]));
            let g = grad_map(stack(1, 1, 1, vec![alpha_g]));
            let cam = layer_cam(&a, &g, 4, 4, &GcameOptions::default()).unwrap();
            // ReLU(α·A·1) for the positive part, ReLU(−α·A·1) for the negative part.
            let expect = ((alpha_g * act) as f64).abs() as f32;
            assert!((cam.raw.data()[0].max(0.0) - expect).abs() < 1e-7);
            let magnitude = GcameOptions {
                negative: NegativePart::Magnitude,
                ..GcameOptions::default()
            };
            let cam = layer_cam(&a, &g, 4, 4, &magnitude).unwrap();
            assert!((cam.raw.data()[0].max(0.0) - (alpha_g * act).max(0.0)).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_alpha_slices_contribute_nothing() {
        let a = feats(Tensor::filled(vec![1, 2, 2], 1.0));
        let g = grad_map(stack(1, 2, 2, vec![1.0, -1.0, 1.0, -1.0]));
        let cam = layer_cam(&a, &g, 8, 8, &GcameOptions::with_mode(CenterMode::TwoStage)).unwrap();
        assert!(cam.used.is_empty());
        assert_eq!(cam.positive, vec![0]);
    }

    #[test]
    fn aggregated_center_search_uses_one_center() {
        let mut g = Tensor::zeros(vec![2, 4, 4]);
        g.set3(0, 0, 0, 1.0);
        g.set3(0, 2, 3, 0.5);
        g.set3(1, 2, 3, 0.9);
        let a = feats(Tensor::filled(vec![2, 4, 4], 1.0));
        let per = layer_cam(&a, &grad_map(g.clone()), 16, 16, &GcameOptions::with_mode(CenterMode::TwoStage)).unwrap();
        assert_eq!(per.used[0].3, (0, 0));
        assert_eq!(per.used[1].3, (2, 3));
        let agg = GcameOptions {
            mode: CenterMode::TwoStage,
            center_search: CenterSearch::Aggregated,
            ..GcameOptions::default()
        };
        let cam = layer_cam(&a, &grad_map(g), 16, 16, &agg).unwrap();
        assert!(cam.used.iter().all(|u| u.3 == (2, 3)));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = feats(Tensor::zeros(vec![2, 4, 4]));
        let g = grad_map(Tensor::zeros(vec![3, 4, 4]));
        assert!(matches!(
            combine_saliency(&a, &g, 8, 8, &GcameOptions::default()),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn mask_is_symmetric_and_bounded(h in 1usize..12, w in 1usize..12, ci in 0usize..12, cj in 0usize..12, sigma in 0.05f64..6.0) {
            prop_assume!(ci < h && cj < w);
            let m = gaussian_mask(h, w, (ci, cj), sigma).unwrap();
            prop_assert_eq!(m.values.at2(ci, cj), 1.0);
            for i in 0..h {
                for j in 0..w {
                    let v = m.values.at2(i, j);
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            for d in 1..12usize {
                let mut ring = Vec::new();
                if ci + d < h { ring.push(m.values.at2(ci + d, cj)); }
                if ci >= d { ring.push(m.values.at2(ci - d, cj)); }
                if cj + d < w { ring.push(m.values.at2(ci, cj + d)); }
                if cj >= d { ring.push(m.values.at2(ci, cj - d)); }
                for pair in ring.windows(2) {
                    prop_assert!((pair[0] - pair[1]).abs() <= 1e-6);
                }
                // radially non-increasing along the axes
                if ci + d < h {
                    prop_assert!(m.values.at2(ci + d, cj) <= m.values.at2(ci + d - 1, cj));
                }
            }
        }

        #[test]
        fn positive_scaling_keeps_partition_and_centers(
            vals in prop::collection::vec(-3.0f32..3.0, 3),
            cells in prop::collection::vec((0usize..6, 0usize..6), 3),
            t in 0.01f32..100.0,
        ) {
            let mut g = Tensor::zeros(vec![3, 6, 6]);
            for (k, (&v, &(i, j))) in vals.iter().zip(&cells).enumerate() {
                g.set3(k, i, j, v);
            }
            let a = feats(Tensor::filled(vec![3, 6, 6], 0.5));
            let base = layer_cam(&a, &grad_map(g.clone()), 48, 48, &GcameOptions::default()).unwrap();
            let scaled = layer_cam(&a, &grad_map(g.scale(t)), 48, 48, &GcameOptions::default()).unwrap();
            prop_assert_eq!(&base.positive, &scaled.positive);
            prop_assert_eq!(&base.negative, &scaled.negative);
            let centers = |c: &LayerCam| c.used.iter().map(|u| (u.0, u.3)).collect::<Vec<_>>();
            prop_assert_eq!(centers(&base), centers(&scaled));
        }

        #[test]
        fn saliency_is_normalized(vals in prop::collection::vec(-2.0f32..2.0, 4 * 5 * 5), acts in prop::collection::vec(0.0f32..3.0, 4 * 5 * 5)) {
            let g = grad_map(Tensor::new(vec![4, 5, 5], vals).unwrap());
            let a = feats(Tensor::new(vec![4, 5, 5], acts).unwrap());
            let s = combine_saliency(&a, &g, 20, 15, &GcameOptions::with_mode(CenterMode::TwoStage)).unwrap();
            prop_assert_eq!(s.values.shape(), &[20, 15]);
            for &v in s.values.data() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
