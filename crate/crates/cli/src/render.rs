//! PNG encoding of slices and decision overlays.

use faith_core::segmenter::SlicePreview;
use faith_core::Dtype;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("window needs lo < hi, got lo = {lo}, hi = {hi}")]
    InvalidWindow { lo: f64, hi: f64 },
    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

/// Gray-level window: values at or below `lo` map to 0, at or above `hi` to
/// 255, linearly in between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub fn new(lo: f64, hi: f64) -> Result<Self, RenderError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(RenderError::InvalidWindow { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    /// The full range `[0, W]`.
    pub fn full(max_value: u32) -> Self {
        Self {
            lo: 0.0,
            hi: max_value as f64,
        }
    }

    /// `round(255 * clamp((v - lo) / (hi - lo), 0, 1))`.
    pub fn map(&self, v: u16) -> u8 {
        let t = ((v as f64 - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        (255.0 * t).round() as u8
    }
}

pub fn window_slice(values: &[u16], window: Window) -> Vec<u8> {
    values.iter().map(|&v| window.map(v)).collect()
}

fn encode(
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<Vec<u8>, RenderError> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(out)
}

/// 8-bit grayscale PNG, rows top to bottom.
pub fn gray_png(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>, RenderError> {
    encode(width, height, png::ColorType::Grayscale, pixels)
}

/// Pixels set by both rules.
pub const BOTH_COLOR: [u8; 4] = [255, 196, 0, 160];
/// Pixels set only by the adaptive rule.
pub const ADAPTIVE_ONLY_COLOR: [u8; 4] = [0, 200, 255, 220];
/// Pixels set only by the global threshold.
pub const GLOBAL_ONLY_COLOR: [u8; 4] = [255, 0, 64, 160];

/// RGBA overlay of a preview; unset pixels are fully transparent.
pub fn overlay_pixels(preview: &SlicePreview) -> Vec<u8> {
    preview
        .adaptive
        .iter()
        .zip(&preview.global)
        .flat_map(|(&a, &g)| match (a, g) {
            (true, true) => BOTH_COLOR,
            (true, false) => ADAPTIVE_ONLY_COLOR,
            (false, true) => GLOBAL_ONLY_COLOR,
            (false, false) => [0; 4],
        })
        .collect()
}

pub fn overlay_png(preview: &SlicePreview) -> Result<Vec<u8>, RenderError> {
    encode(
        preview.width,
        preview.height,
        png::ColorType::Rgba,
        &overlay_pixels(preview),
    )
}

/// RGB image of `gray` with `overlay` (RGBA, same size) alpha-blended on top.
pub fn composite_rgb(gray: &[u8], overlay: &[u8]) -> Vec<u8> {
    gray.iter()
        .zip(overlay.chunks_exact(4))
        .flat_map(|(&g, o)| {
            let a = o[3] as u32;
            let mix = |c: u8| ((c as u32 * a + g as u32 * (255 - a) + 127) / 255) as u8;
            [mix(o[0]), mix(o[1]), mix(o[2])]
        })
        .collect()
}

pub fn rgb_png(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>, RenderError> {
    encode(width, height, png::ColorType::Rgb, pixels)
}

/// Slice values in the volume's own sample width, little endian.
pub fn raw_slice_bytes(values: &[u16], dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::Uint8 => values.iter().map(|&v| v as u8).collect(),
        Dtype::Uint16 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}
