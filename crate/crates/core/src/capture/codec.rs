use std::io::Cursor;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::ImageRgb;

pub const DEFAULT_QUALITY: f32 = 75.0;

/// A lossy image encoder whose output size stands in for information content.
pub trait LossyCodec {
    fn name(&self) -> &'static str;
    fn quality(&self) -> f32;
    fn encode(&self, image: &ImageRgb) -> Result<Vec<u8>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WebpCodec {
    pub quality: f32,
}

impl WebpCodec {
    pub fn new(quality: f32) -> Result<Self> {
        if !(0.0..=100.0).contains(&quality) {
            return Err(Error::InvalidInput(format!(
                "quality must be in [0, 100], got {quality}"
            )));
        }
        Ok(Self { quality })
    }
}

impl Default for WebpCodec {
    fn default() -> Self {
        Self {
            quality: DEFAULT_QUALITY,
        }
    }
}

impl LossyCodec for WebpCodec {
    fn name(&self) -> &'static str {
        "webp"
    }

    fn quality(&self) -> f32 {
        self.quality
    }

    fn encode(&self, image: &ImageRgb) -> Result<Vec<u8>> {
        let rgb = image.to_rgb8();
        let enc = webp::Encoder::from_rgb(&rgb, image.width() as u32, image.height() as u32);
        let mem = enc
            .encode_simple(false, self.quality)
            .map_err(|e| Error::Encode(format!("{e:?}")))?;
        Ok(mem.to_vec())
    }
}

/// WebP bytes at `quality` in `[0, 100]`.
pub fn encode_lossy(image: &ImageRgb, quality: f32) -> Result<Vec<u8>> {
    WebpCodec::new(quality)?.encode(image)
}

pub fn encode_png(image: &ImageRgb) -> Result<Vec<u8>> {
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .ok_or_else(|| Error::Image("buffer size does not match dimensions".into()))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageRgb> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_rgb8();
    ImageRgb::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
}
