use serde::{Deserialize, Serialize};

use crate::capture::codec::encode_png;
use crate::error::{Error, Result};
use crate::gcame::SaliencyMap;
use crate::numerics::ImageRgb;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    #[default]
    Jet,
    Gray,
}

impl Colormap {
    pub fn color(self, v: f32) -> [f32; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Colormap::Gray => [v; 3],
            Colormap::Jet => {
                let ramp = |x: f32| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0);
                [ramp(3.0), ramp(2.0), ramp(1.0)]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapStyle {
    pub colormap: Colormap,
    pub alpha: f32,
}

impl Default for HeatmapStyle {
    fn default() -> Self {
        Self {
            colormap: Colormap::Jet,
            alpha: 0.5,
        }
    }
}

/// Colormapped saliency blended over the image.
pub fn overlay(image: &ImageRgb, saliency: &SaliencyMap, style: &HeatmapStyle) -> Result<ImageRgb> {
    if !(0.0..=1.0).contains(&style.alpha) {
        return Err(Error::InvalidInput(format!("alpha {} outside [0, 1]", style.alpha)));
    }
    if saliency.height() != image.height() || saliency.width() != image.width() {
        return Err(Error::Shape(format!(
            "saliency {}x{} vs image {}x{}",
            saliency.height(),
            saliency.width(),
            image.height(),
            image.width()
        )));
    }
    let a = style.alpha;
    let mut out = image.clone();
    for (p, &s) in saliency.values.data().iter().enumerate() {
        let (r, c) = (p / image.width(), p % image.width());
        let px = image.pixel(r, c);
        let heat = style.colormap.color(s);
        out.set_pixel(r, c, std::array::from_fn(|ch| (1.0 - a) * px[ch] + a * heat[ch]));
    }
    Ok(out)
}

pub fn render_heatmap(image: &ImageRgb, saliency: &SaliencyMap, style: &HeatmapStyle) -> Result<Vec<u8>> {
    encode_png(&overlay(image, saliency, style)?)
}

/// Tiles rows of equally sized images into one, separated by `gap` white pixels.
pub fn compose_grid(rows: &[Vec<ImageRgb>], gap: usize) -> Result<ImageRgb> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::InvalidInput("empty grid".into()))?;
    let (th, tw) = (first.height(), first.width());
    if rows.iter().flatten().any(|t| t.height() != th || t.width() != tw) {
        return Err(Error::Shape("grid tiles differ in size".into()));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let h = rows.len() * th + rows.len().saturating_sub(1) * gap;
    let w = cols * tw + cols.saturating_sub(1) * gap;
    let mut out = ImageRgb::filled(h, w, [1.0; 3])?;
    for (ri, row) in rows.iter().enumerate() {
        for (ci, tile) in row.iter().enumerate() {
            let (oy, ox) = (ri * (th + gap), ci * (tw + gap));
            for y in 0..th {
                for x in 0..tw {
                    out.set_pixel(oy + y, ox + x, tile.pixel(y, x));
                }
            }
        }
    }
    Ok(out)
}
