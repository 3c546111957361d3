//! Weight-randomization sanity checks: an explanation that survives
//! re-drawing the model's weights is not explaining the model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{Branch, Detector, ScoreTarget, ToySource};
use crate::error::{Error, Result};
use crate::gcame::{explain, GcameOptions, SaliencyMap};
use crate::numerics::{ImageRgb, Tensor};

pub const DEFAULT_STD: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomizationMode {
    /// The target layer and every class-branch layer after it.
    Cascading,
    /// The target layer alone.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RandomizationPlan {
    pub mode: RandomizationMode,
    pub target_layer_id: String,
    pub seed: u64,
    pub std: f32,
}

impl RandomizationPlan {
    pub fn new(mode: RandomizationMode, layer: &str, seed: u64) -> Self {
        Self {
            mode,
            target_layer_id: layer.to_string(),
            seed,
            std: DEFAULT_STD,
        }
    }
}

/// Ids of the layers `plan` re-draws, in evaluation order.
pub fn affected_layers(detector: &Detector, plan: &RandomizationPlan) -> Result<Vec<String>> {
    let target = &plan.target_layer_id;
    if detector.weights().get(target).is_none() {
        return Err(Error::UnknownLayer(target.clone()));
    }
    Ok(match plan.mode {
        RandomizationMode::Independent => vec![target.clone()],
        RandomizationMode::Cascading => detector
            .descendants(target)?
            .into_iter()
            .filter(|id| {
                id == target
                    || detector.weights().get(id).map(|l| l.branch) != Some(Branch::Regression)
            })
            .collect(),
    })
}

/// A copy of `detector` with the planned layers' weights and biases drawn
/// from `N(0, std²)`. The input is left untouched.
pub fn randomize(detector: &Detector, plan: &RandomizationPlan) -> Result<Detector> {
    let normal = Normal::new(0.0f32, plan.std)
        .map_err(|e| Error::InvalidInput(format!("bad std {}: {e}", plan.std)))?;
    let layers = affected_layers(detector, plan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut out = detector.clone();
    for id in &layers {
        let layer = out
            .weights_mut()
            .get_mut(id)
            .ok_or_else(|| Error::UnknownLayer(id.clone()))?;
        for v in layer.weight.data_mut() {
            *v = normal.sample(&mut rng);
        }
        for v in layer.bias.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Copies `layer`'s weights from `original` back into `detector`.
pub fn restore_layer(detector: &Detector, original: &Detector, layer: &str) -> Result<Detector> {
    let src = original
        .weights()
        .get(layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?
        .clone();
    let mut out = detector.clone();
    let dst = out
        .weights_mut()
        .get_mut(layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    *dst = src;
    Ok(out)
}

/// Pearson correlation over all entries. `None` when either side is constant.
pub fn pearson(a: &Tensor, b: &Tensor) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let n = a.len() as f64;
    let mean = |t: &Tensor| t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug)]
pub struct SanityEntry {
    pub label: String,
    pub plan: Option<RandomizationPlan>,
    pub saliency: SaliencyMap,
    /// Correlation with the original map; `None` if either map is constant.
    pub pearson: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SanityReport {
    pub original: SaliencyMap,
    pub entries: Vec<SanityEntry>,
}

impl SanityReport {
    /// Mean correlation over entries, treating undefined correlations as 0.
    pub fn mean_pearson(&self) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        let sum: f64 = self.entries.iter().map(|e| e.pearson.unwrap_or(0.0)).sum();
        Some(sum / self.entries.len() as f64)
    }
}

/// Saliency for `target` on `detector`. The gradient is taken at the target
/// cell even when that cell no longer yields a detection.
pub fn explain_cell(
    detector: &Detector,
    image: &ImageRgb,
    target: ScoreTarget,
    layers: &[String],
    options: &GcameOptions,
) -> Result<SaliencyMap> {
    let (_, cache) = detector.forward(image)?;
    explain(&ToySource::new(detector, &cache, target), layers, options)
}

/// Explains `target` on each variant and correlates with the original map.
pub fn compare_variants(
    original: &Detector,
    variants: Vec<(String, Option<RandomizationPlan>, Detector)>,
    image: &ImageRgb,
    target: ScoreTarget,
    layers: &[String],
    options: &GcameOptions,
) -> Result<SanityReport> {
    let base = explain_cell(original, image, target, layers, options)?;
    let mut entries = Vec::with_capacity(variants.len());
    for (label, plan, det) in variants {
        let saliency = explain_cell(&det, image, target, layers, options)?;
        let pearson = pearson(&base.values, &saliency.values);
        entries.push(SanityEntry {
            label,
            plan,
            saliency,
            pearson,
        });
    }
    Ok(SanityReport {
        original: base,
        entries,
    })
}

pub fn sanity_report(
    detector: &Detector,
    image: &ImageRgb,
    target: ScoreTarget,
    plans: &[RandomizationPlan],
    layers: &[String],
    options: &GcameOptions,
) -> Result<SanityReport> {
    let variants = plans
        .iter()
        .map(|p| {
            let label = format!(
                "{}:{}:{}",
                match p.mode {
                    RandomizationMode::Cascading => "cascading",
                    RandomizationMode::Independent => "independent",
                },
                p.target_layer_id,
                p.seed
            );
            Ok((label, Some(p.clone()), randomize(detector, p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    compare_variants(detector, variants, image, target, layers, options)
}
