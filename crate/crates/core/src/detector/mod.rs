//! A small anchor-free, one-stage detector with a decoupled 1×1 head.
//!
//! The network is a plain list of convolution layers evaluated in order; each
//! layer names the tensor it reads from (`"image"` or an earlier layer id).
//! Per pyramid level `l` the layers are
//!
//! ```text
//! color ─ pool{l} ─ neck{l} ─┬─ cls{l} ─ cls_pred{l}            (class branch)
//!                            └─ reg{l} ─┬─ obj_pred{l}          (regression branch)
//!                                       └─ reg_pred{l}
//! ```
//!
//! `cls{l}` is the input of the 1×1 class predictor, so the gradient of one
//! cell's class score with respect to it is supported on that cell alone.
//! Weights come from [`build_blob_detector`]; nothing is trained.

mod blob;
pub mod fixtures;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcame::{FeatureMapStack, GradientMap, LayerSource};
use crate::metrics::{iou, BoundingBox};
use crate::numerics::{conv2d, conv2d_input_grad, sigmoid, Activation, ImageRgb, Tensor};

pub use blob::build_blob_detector;

/// Name of the pseudo-layer holding the input image.
pub const IMAGE_INPUT: &str = "image";

/// One pyramid level of the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub stride: usize,
    /// Channels `K` of the class-branch layer explained by default.
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DetectorConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub levels: Vec<LevelConfig>,
    pub num_classes: usize,
    pub score_threshold: f32,
    pub nms_iou: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::single_level(64, 64, 8, 64, 3)
    }
}

impl DetectorConfig {
    pub fn single_level(
        input_h: usize,
        input_w: usize,
        stride: usize,
        channels: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            input_h,
            input_w,
            levels: vec![LevelConfig { stride, channels }],
            num_classes,
            score_threshold: 0.5,
            nms_iou: 0.45,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::UnsupportedConfig(m));
        if self.input_h == 0 || self.input_w == 0 {
            return bad("input size must be positive".into());
        }
        if self.levels.is_empty() {
            return bad("at least one level is required".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        for (l, level) in self.levels.iter().enumerate() {
            if level.stride == 0
                || self.input_h % level.stride != 0
                || self.input_w % level.stride != 0
            {
                return bad(format!(
                    "level {l}: stride {} must divide the {}x{} input",
                    level.stride, self.input_h, self.input_w
                ));
            }
            if level.channels == 0 {
                return bad(format!("level {l}: channels must be >= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("score_threshold and nms_iou must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Feature-map size `(h, w)` of a level.
    pub fn grid(&self, level: usize) -> (usize, usize) {
        let s = self.levels[level].stride;
        (self.input_h / s, self.input_w / s)
    }
}

/// Which part of the network a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Backbone,
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub id: String,
    pub input: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub activation: Option<Activation>,
    pub branch: Branch,
}

impl ConvLayer {
    fn run(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let pre = conv2d(x, &self.weight, &self.bias, self.stride, self.padding)?;
        let post = match self.activation {
            Some(act) => pre.map(|v| act.apply(v)),
            None => pre.clone(),
        };
        Ok((pre, post))
    }

    fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Per-layer weights, in evaluation order.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorWeights {
    pub layers: Vec<ConvLayer>,
}

impl DetectorWeights {
    pub fn get(&self, id: &str) -> Option<&ConvLayer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut ConvLayer> {
        self.layers.iter_mut().find(|l| l.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }
}

pub fn cls_layer(level: usize) -> String {
    format!("cls{level}")
}

pub fn cls_pred_layer(level: usize) -> String {
    format!("cls_pred{level}")
}

fn obj_pred_layer(level: usize) -> String {
    format!("obj_pred{level}")
}

fn reg_pred_layer(level: usize) -> String {
    format!("reg_pred{level}")
}

/// Grid cell of a level that produced a detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SourceCell {
    pub level_index: usize,
    pub cell_row: usize,
    pub cell_col: usize,
}

/// One predicted box: corners, objectness, per-class probabilities and the
/// grid cell it was decoded from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(rename = "pObj")]
    pub objectness: f32,
    pub class_scores: Vec<f32>,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceCell>,
}

impl Detection {
    /// `p_obj · p_classId`.
    pub fn score(&self) -> f32 {
        self.objectness * self.class_scores[self.class_id]
    }

    /// `p_obj · p_c` for an arbitrary class.
    pub fn class_confidence(&self, class_id: usize) -> f32 {
        self.class_scores
            .get(class_id)
            .map_or(0.0, |p| self.objectness * p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_valid() {
            return Err(Error::InvalidInput(format!("degenerate box {:?}", self.bbox)));
        }
        if self.class_id >= self.class_scores.len() {
            return Err(Error::InvalidInput(format!(
                "class id {} with {} class scores",
                self.class_id,
                self.class_scores.len()
            )));
        }
        let in_unit = |p: f32| (0.0..=1.0).contains(&p);
        if !in_unit(self.objectness) || !self.class_scores.iter().all(|&p| in_unit(p)) {
            return Err(Error::InvalidInput("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The scalar that gets differentiated: class `class_id`'s logit at one cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreTarget {
    pub cell: SourceCell,
    pub class_id: usize,
}

impl ScoreTarget {
    pub fn of(det: &Detection) -> Result<Self> {
        let cell = det.source.ok_or_else(|| {
            Error::InvalidInput("detection has no source cell".into())
        })?;
        Ok(Self {
            cell,
            class_id: det.class_id,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CachedLayer {
    pub pre: Tensor,
    pub post: Tensor,
}

/// Pre- and post-activation outputs of every layer from one forward pass.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    image: Tensor,
    layers: HashMap<String, CachedLayer>,
}

impl ActivationCache {
    pub fn get(&self, id: &str) -> Option<&CachedLayer> {
        self.layers.get(id)
    }

    /// Output of `id` (post-activation), or the image for [`IMAGE_INPUT`].
    pub fn output(&self, id: &str) -> Result<&Tensor> {
        if id == IMAGE_INPUT {
            return Ok(&self.image);
        }
        self.layers
            .get(id)
            .map(|c| &c.post)
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    weights: DetectorWeights,
}

impl Detector {
    /// Assembles a detector from explicit weights, checking they fit the config.
    pub fn from_parts(config: DetectorConfig, weights: DetectorWeights) -> Result<Self> {
        config.validate()?;
        let det = Self { config, weights };
        let dummy = ImageRgb::filled(det.config.input_h, det.config.input_w, [0.5; 3])?;
        det.run_layers(&dummy.to_chw())?;
        for l in 0..det.config.levels.len() {
            let c = det.config.num_classes;
            for (id, ch) in [
                (cls_pred_layer(l), c),
                (obj_pred_layer(l), 1),
                (reg_pred_layer(l), 4),
            ] {
                let layer = det.weights.get(&id).ok_or(Error::UnknownLayer(id.clone()))?;
                if layer.out_channels() != ch {
                    return Err(Error::UnsupportedConfig(format!(
                        "{id} must produce {ch} channels"
                    )));
                }
            }
        }
        Ok(det)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn weights(&self) -> &DetectorWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DetectorWeights {
        &mut self.weights
    }

    /// Side length of the squares level `level` is calibrated for.
    pub fn object_side(&self, level: usize) -> usize {
        2 * self.config.levels[level].stride
    }

    /// Ids of all layers in evaluation order.
    pub fn layer_ids(&self) -> Vec<&str> {
        self.weights.layers.iter().map(|l| l.id.as_str()).collect()
    }

    /// The class-head input layer of a level (the default explanation target).
    pub fn class_head_input(&self, level: usize) -> String {
        cls_layer(level)
    }

    /// `target` plus every layer that consumes it directly or indirectly.
    pub fn descendants(&self, target: &str) -> Result<Vec<String>> {
        if self.weights.get(target).is_none() {
            return Err(Error::UnknownLayer(target.to_string()));
        }
        let mut set = BTreeSet::new();
        set.insert(target.to_string());
        let mut out = Vec::new();
        for layer in &self.weights.layers {
            if layer.id == target || set.contains(&layer.input) {
                set.insert(layer.id.clone());
                out.push(layer.id.clone());
            }
        }
        Ok(out)
    }

    fn run_layers(&self, image: &Tensor) -> Result<HashMap<String, CachedLayer>> {
        let mut cache: HashMap<String, CachedLayer> = HashMap::new();
        for layer in &self.weights.layers {
            let x = if layer.input == IMAGE_INPUT {
                image
            } else {
                &cache
                    .get(&layer.input)
                    .ok_or_else(|| Error::UnknownLayer(layer.input.clone()))?
                    .post
            };
            let (pre, post) = layer.run(x)?;
            cache.insert(layer.id.clone(), CachedLayer { pre, post });
        }
        Ok(cache)
    }

    /// Runs the network and decodes, thresholds and suppresses detections.
    /// Detections come back sorted by score, highest first.
    pub fn forward(&self, image: &ImageRgb) -> Result<(Vec<Detection>, ActivationCache)> {
        if image.height() != self.config.input_h || image.width() != self.config.input_w {
            return Err(Error::InvalidInput(format!(
                "image is {}x{}, detector expects {}x{}",
                image.height(),
                image.width(),
                self.config.input_h,
                self.config.input_w
            )));
        }
        let chw = image.to_chw();
        let layers = self.run_layers(&chw)?;
        let cache = ActivationCache { image: chw, layers };
        let dets = self.decode(&cache)?;
        Ok((dets, cache))
    }

    fn cell_probabilities(
        &self,
        cache: &ActivationCache,
        cell: SourceCell,
    ) -> Result<(f32, Vec<f32>)> {
        let l = cell.level_index;
        let cls = cache.output(&cls_pred_layer(l))?;
        let obj = cache.output(&obj_pred_layer(l))?;
        let (i, j) = (cell.cell_row, cell.cell_col);
        let p_obj = sigmoid(obj.at3(0, i, j));
        let scores = (0..self.config.num_classes)
            .map(|c| sigmoid(cls.at3(c, i, j)))
            .collect();
        Ok((p_obj, scores))
    }

    fn decode(&self, cache: &ActivationCache) -> Result<Vec<Detection>> {
        let (img_h, img_w) = (self.config.input_h as f32, self.config.input_w as f32);
        let mut candidates = Vec::new();
        for (l, level) in self.config.levels.iter().enumerate() {
            let reg = cache.output(&reg_pred_layer(l))?;
            let (h, w) = self.config.grid(l);
            let s = level.stride as f32;
            for i in 0..h {
                for j in 0..w {
                    let cell = SourceCell {
                        level_index: l,
                        cell_row: i,
                        cell_col: j,
                    };
                    let (objectness, class_scores) = self.cell_probabilities(cache, cell)?;
                    let class_id = argmax_first(&class_scores);
                    let det = Detection {
                        bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0),
                        objectness,
                        class_scores,
                        class_id,
                        source: Some(cell),
                    };
                    if det.score() < self.config.score_threshold {
                        continue;
                    }
                    let cx = (j as f32 + reg.at3(0, i, j)) * s;
                    let cy = (i as f32 + reg.at3(1, i, j)) * s;
                    let bw = reg.at3(2, i, j).exp() * s;
                    let bh = reg.at3(3, i, j).exp() * s;
                    let bbox = BoundingBox::new(
                        (cx - bw / 2.0).max(0.0),
                        (cy - bh / 2.0).max(0.0),
                        (cx + bw / 2.0).min(img_w),
                        (cy + bh / 2.0).min(img_h),
                    );
                    if bbox.is_valid() {
                        candidates.push(Detection { bbox, ..det });
                    }
                }
            }
        }
        Ok(nms(candidates, self.config.nms_iou))
    }

    fn check_detection(&self, cache: &ActivationCache, det: &Detection) -> Result<ScoreTarget> {
        let target = ScoreTarget::of(det)?;
        self.check_target(target)?;
        let (p_obj, scores) = self.cell_probabilities(cache, target.cell)?;
        if p_obj != det.objectness || scores != det.class_scores {
            return Err(Error::StaleDetection(
                "detection scores do not match this forward pass".into(),
            ));
        }
        Ok(target)
    }

    fn check_target(&self, target: ScoreTarget) -> Result<()> {
        let cell = target.cell;
        if cell.level_index >= self.config.levels.len() {
            return Err(Error::StaleDetection(format!(
                "level {} does not exist",
                cell.level_index
            )));
        }
        let (h, w) = self.config.grid(cell.level_index);
        if cell.cell_row >= h || cell.cell_col >= w || target.class_id >= self.config.num_classes
        {
            return Err(Error::StaleDetection(format!(
                "cell ({}, {}) / class {} out of range",
                cell.cell_row, cell.cell_col, target.class_id
            )));
        }
        Ok(())
    }

    /// The differentiated score: class logit times detached `sigmoid(obj)`.
    pub fn target_score(&self, cache: &ActivationCache, target: ScoreTarget) -> Result<f32> {
        self.check_target(target)?;
        let c = target.cell;
        let logit = cache
            .output(&cls_pred_layer(c.level_index))?
            .at3(target.class_id, c.cell_row, c.cell_col);
        let p_obj = sigmoid(
            cache
                .output(&obj_pred_layer(c.level_index))?
                .at3(0, c.cell_row, c.cell_col),
        );
        Ok(p_obj * logit)
    }

    /// ∂S/∂A for the output `A` of `layer`, where `S` is the detection's
    /// class logit scaled by its (constant) objectness probability.
    pub fn backward_class_score(
        &self,
        cache: &ActivationCache,
        det: &Detection,
        layer: &str,
    ) -> Result<GradientMap> {
        let target = self.check_detection(cache, det)?;
        self.backward_at(cache, target, layer)
    }

    /// Same as [`Self::backward_class_score`] for an explicit cell and class,
    /// whether or not that cell survived decoding.
    pub fn backward_at(
        &self,
        cache: &ActivationCache,
        target: ScoreTarget,
        layer: &str,
    ) -> Result<GradientMap> {
        self.check_target(target)?;
        let target_pos = self
            .weights
            .position(layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
        let cell = target.cell;
        let head = cls_pred_layer(cell.level_index);
        let head_pos = self
            .weights
            .position(&head)
            .ok_or_else(|| Error::UnknownLayer(head.clone()))?;

        let p_obj = sigmoid(
            cache
                .output(&obj_pred_layer(cell.level_index))?
                .at3(0, cell.cell_row, cell.cell_col),
        );
        let mut grads: HashMap<String, Tensor> = HashMap::new();
        let mut seed = Tensor::zeros(cache.output(&head)?.shape().to_vec());
        seed.set3(target.class_id, cell.cell_row, cell.cell_col, p_obj);
        grads.insert(head.clone(), seed);

        if target_pos <= head_pos {
            for layer_w in self.weights.layers[target_pos..=head_pos].iter().rev() {
                let Some(g_post) = grads.remove(&layer_w.id) else {
                    continue;
                };
                if layer_w.id == layer {
                    return Ok(self.gradient_map(layer, g_post, target));
                }
                let cached = cache
                    .get(&layer_w.id)
                    .ok_or_else(|| Error::UnknownLayer(layer_w.id.clone()))?;
                let g_pre = match layer_w.activation {
                    Some(act) => Tensor::new(
                        g_post.shape().to_vec(),
                        g_post
                            .data()
                            .iter()
                            .zip(cached.pre.data())
                            .map(|(g, &x)| g * act.derivative(x))
                            .collect(),
                    )?,
                    None => g_post,
                };
                if layer_w.input == IMAGE_INPUT {
                    continue;
                }
                let input_shape = cache.output(&layer_w.input)?.dims3()?;
                let g_in = conv2d_input_grad(
                    &g_pre,
                    &layer_w.weight,
                    input_shape,
                    layer_w.stride,
                    layer_w.padding,
                )?;
                match grads.get_mut(&layer_w.input) {
                    Some(acc) => *acc = acc.add(&g_in)?,
                    None => {
                        grads.insert(layer_w.input.clone(), g_in);
                    }
                }
            }
        }
        // Layer is not upstream of the target score.
        let shape = cache.output(layer)?.shape().to_vec();
        Ok(self.gradient_map(layer, Tensor::zeros(shape), target))
    }

    fn gradient_map(&self, layer: &str, values: Tensor, target: ScoreTarget) -> GradientMap {
        GradientMap {
            values,
            layer_id: layer.to_string(),
            target: Some(target.cell),
        }
    }

    /// Central-difference estimate of [`Self::backward_class_score`]: every
    /// entry of `layer`'s output is nudged by ±`eps` and only the layers
    /// between it and the class predictor are re-evaluated.
    pub fn finite_diff_gradient(
        &self,
        image: &ImageRgb,
        det: &Detection,
        layer: &str,
        eps: f32,
    ) -> Result<GradientMap> {
        if !(eps > 0.0) {
            return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
        }
        let (_, cache) = self.forward(image)?;
        let target = self.check_detection(&cache, det)?;
        self.finite_diff_at(&cache, target, layer, eps)
    }

    pub fn finite_diff_at(
        &self,
        cache: &ActivationCache,
        target: ScoreTarget,
        layer: &str,
        eps: f32,
    ) -> Result<GradientMap> {
        self.check_target(target)?;
        let head = cls_pred_layer(target.cell.level_index);
        let base = cache.output(layer)?.clone();
        let downstream: Vec<&ConvLayer> = {
            let desc = self.descendants(layer)?;
            let upstream_of_head = self.ancestors(&head);
            self.weights
                .layers
                .iter()
                .filter(|l| l.id != layer && desc.contains(&l.id) && upstream_of_head.contains(&l.id))
                .collect()
        };
        let c = target.cell;
        let p_obj = sigmoid(
            cache
                .output(&obj_pred_layer(c.level_index))?
                .at3(0, c.cell_row, c.cell_col),
        );
        let reaches_head = downstream.iter().any(|l| l.id == head) || layer == head;

        let eval = |perturbed: &Tensor| -> Result<f32> {
            let mut local: HashMap<&str, Tensor> = HashMap::new();
            local.insert(layer, perturbed.clone());
            for l in &downstream {
                let x = match local.get(l.input.as_str()) {
                    Some(t) => t,
                    None => cache.output(&l.input)?,
                };
                let (_, post) = l.run(x)?;
                local.insert(l.id.as_str(), post);
            }
            Ok(p_obj * local[head.as_str()].at3(target.class_id, c.cell_row, c.cell_col))
        };

        let mut grad = vec![0.0f32; base.len()];
        if reaches_head {
            let mut work = base.clone();
            for idx in 0..base.len() {
                let orig = base.data()[idx];
                work.data_mut()[idx] = orig + eps;
                let up = eval(&work)?;
                work.data_mut()[idx] = orig - eps;
                let down = eval(&work)?;
                work.data_mut()[idx] = orig;
                grad[idx] = (up - down) / (2.0 * eps);
            }
        }
        Ok(self.gradient_map(layer, Tensor::new(base.shape().to_vec(), grad)?, target))
    }

    /// `id` plus every layer it reads from, transitively.
    fn ancestors(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut cur = Some(id.to_string());
        let mut frontier = Vec::new();
        while let Some(x) = cur.take().or_else(|| frontier.pop()) {
            if let Some(layer) = self.weights.get(&x) {
                if out.insert(x.clone()) && layer.input != IMAGE_INPUT {
                    frontier.push(layer.input.clone());
                }
            }
        }
        out
    }
}

fn argmax_first(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy class-agnostic non-maximum suppression. Input order breaks score ties.
pub fn nms(mut candidates: Vec<Detection>, iou_threshold: f32) -> Vec<Detection> {
    candidates.sort_by(|a, b| b.score().total_cmp(&a.score()));
    let mut kept: Vec<Detection> = Vec::new();
    for cand in candidates {
        if kept
            .iter()
            .all(|k| iou(&k.bbox, &cand.bbox) < iou_threshold as f64)
        {
            kept.push(cand);
        }
    }
    kept
}

/// Binds a detector, one image's forward pass and a target score so the
/// explainer can pull `(A, ∂S/∂A)` pairs for any layer.
pub struct ToySource<'a> {
    pub detector: &'a Detector,
    pub cache: &'a ActivationCache,
    pub target: ScoreTarget,
}

impl<'a> ToySource<'a> {
    pub fn new(detector: &'a Detector, cache: &'a ActivationCache, target: ScoreTarget) -> Self {
        Self {
            detector,
            cache,
            target,
        }
    }
}

impl LayerSource for ToySource<'_> {
    fn image_size(&self) -> (usize, usize) {
        (self.detector.config.input_h, self.detector.config.input_w)
    }

    fn layer_maps(&self, layer: &str) -> Result<(FeatureMapStack, GradientMap)> {
        let grad = self.detector.backward_at(self.cache, self.target, layer)?;
        let features = FeatureMapStack {
            values: self.cache.output(layer)?.clone(),
            layer_id: layer.to_string(),
        };
        Ok((features, grad))
    }
}
