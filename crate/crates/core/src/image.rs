//! Scan preprocessing: decode, grey conversion, ink-based cropping and
//! bilinear resizing into normalized tensors where ink is 1.0 and paper 0.0.

use std::io::{Cursor, Read, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("unsupported image format")]
    UnsupportedFormat,
    #[error("corrupt image file: {0}")]
    CorruptFile(String),
    #[error("drawing contains no ink")]
    EmptyDrawing,
    #[error("tensor file: {0}")]
    TensorFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit pixel buffer, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::CorruptFile("zero-sized image".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::UnsupportedFormat);
        }
        if pixels.len() != width * height * channels {
            return Err(ImageError::CorruptFile(format!("expected {} bytes, got {}", width * height * channels, pixels.len())));
        }
        Ok(RawImage { width, height, channels, pixels })
    }

    /// White single-channel page.
    pub fn blank(width: usize, height: usize) -> Self {
        RawImage { width, height, channels: 1, pixels: vec![255; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    /// Grey value at `(x, y)`; only meaningful for single-channel images.
    pub fn gray_at(&self, x: usize, y: usize) -> u8 {
        debug_assert_eq!(self.channels, 1);
        self.pixels[y * self.width + x]
    }

    fn sub_image(&self, rect: PixelRect) -> RawImage {
        let mut pixels = Vec::with_capacity(rect.width() * rect.height() * self.channels);
        for y in rect.y0..rect.y1 {
            let start = (y * self.width + rect.x0) * self.channels;
            let end = (y * self.width + rect.x1) * self.channels;
            pixels.extend_from_slice(&self.pixels[start..end]);
        }
        RawImage { width: rect.width(), height: rect.height(), channels: self.channels, pixels }
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// Normalized single-channel tensor; 1.0 is ink, 0.0 is blank paper.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayTensor {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl GrayTensor {
    pub fn zeros(height: usize, width: usize) -> Self {
        GrayTensor { height, width, values: vec![0.0; height * width] }
    }

    /// Builds a tensor, clamping values into `[0, 1]`.
    pub fn from_values(height: usize, width: usize, mut values: Vec<f32>) -> Self {
        assert_eq!(values.len(), height * width, "tensor length mismatch");
        for v in &mut values {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        GrayTensor { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn ink_mass(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    /// Back to an 8-bit page (ink dark on white).
    pub fn to_raw(&self) -> RawImage {
        let pixels = self.values.iter().map(|&v| (255.0 * (1.0 - v)).round() as u8).collect();
        RawImage { width: self.width, height: self.height, channels: 1, pixels }
    }

    /// Flat binary form: `u32` height, `u32` width, then `f32` values, all
    /// little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), ImageError> {
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.values.len());
        self.write_binary(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, ImageError> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|e| ImageError::TensorFile(e.to_string()))?;
        let height = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(|e| ImageError::TensorFile(e.to_string()))?;
        let width = u32::from_le_bytes(word) as usize;
        if height == 0 || width == 0 || height.saturating_mul(width) > 1 << 26 {
            return Err(ImageError::TensorFile(format!("bad dims {height}x{width}")));
        }
        let mut bytes = vec![0u8; 4 * height * width];
        r.read_exact(&mut bytes).map_err(|e| ImageError::TensorFile(e.to_string()))?;
        let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ImageError::TensorFile("value outside [0, 1]".into()));
        }
        Ok(GrayTensor { height, width, values })
    }
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

/// Decodes a PNG into 8-bit grey or RGB. Alpha is dropped; 16-bit samples
/// are reduced to 8 bits and palettes expanded.
pub fn decode_image(bytes: &[u8]) -> Result<RawImage, ImageError> {
    if bytes.len() < PNG_SIGNATURE.len() || bytes[..8] != PNG_SIGNATURE {
        return Err(ImageError::UnsupportedFormat);
    }
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| ImageError::CorruptFile(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| ImageError::CorruptFile("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| ImageError::CorruptFile(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (width, height) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let (channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (1, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (3, 3),
        png::ColorType::Indexed => return Err(ImageError::UnsupportedFormat),
    };
    let pixels =
        if src_channels == keep { buf } else { buf.chunks_exact(src_channels).flat_map(|px| px[..keep].iter().copied()).collect() };
    RawImage::new(width, height, channels, pixels)
}

/// Lossless 8-bit PNG encoding of a grey or RGB image.
pub fn encode_png(img: &RawImage) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| ImageError::CorruptFile(e.to_string()))?;
        writer.write_image_data(&img.pixels).map_err(|e| ImageError::CorruptFile(e.to_string()))?;
    }
    Ok(out)
}

/// BT.601 luminance, rounded half-up. Single-channel input is returned as is.
pub fn to_gray(img: &RawImage) -> RawImage {
    match img.channels {
        1 => img.clone(),
        3 => {
            let pixels = img.pixels.chunks_exact(3).map(|px| luminance(px[0], px[1], px[2])).collect();
            RawImage { width: img.width, height: img.height, channels: 1, pixels }
        }
        c => panic!("to_gray: unsupported channel count {c}"),
    }
}

fn luminance(r: u8, g: u8, b: u8) -> u8 {
    // Integer weights (x1000) keep grey inputs exact.
    let y = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
    ((y + 500) / 1000) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    /// Pixels strictly darker than this count as ink.
    pub ink_threshold: u8,
    /// Margin added on each side, as a fraction of the ink box extent.
    pub margin_fraction: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig { ink_threshold: 200, margin_fraction: 0.04 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CropOutcome {
    Cropped {
        image: RawImage,
        rect: PixelRect,
    },
    /// No ink found; carries the unchanged input.
    EmptyDrawing(RawImage),
}

impl CropOutcome {
    pub fn image(&self) -> &RawImage {
        match self {
            CropOutcome::Cropped { image, .. } | CropOutcome::EmptyDrawing(image) => image,
        }
    }

    pub fn into_image(self) -> RawImage {
        match self {
            CropOutcome::Cropped { image, .. } | CropOutcome::EmptyDrawing(image) => image,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, CropOutcome::EmptyDrawing(_))
    }
}

/// Bounding box of pixels darker than the threshold.
pub fn ink_bbox(img: &RawImage, ink_threshold: u8) -> Option<PixelRect> {
    assert_eq!(img.channels, 1, "ink_bbox expects a grey image");
    let mut rect: Option<PixelRect> = None;
    for y in 0..img.height {
        let row = &img.pixels[y * img.width..(y + 1) * img.width];
        let first = row.iter().position(|&p| p < ink_threshold);
        let Some(first) = first else { continue };
        let last = row.iter().rposition(|&p| p < ink_threshold).unwrap_or(first);
        rect = Some(match rect {
            None => PixelRect { x0: first, y0: y, x1: last + 1, y1: y + 1 },
            Some(r) => PixelRect { x0: r.x0.min(first), y0: r.y0, x1: r.x1.max(last + 1), y1: y + 1 },
        });
    }
    rect
}

/// Crops to the ink bounding box plus a proportional margin, clamped to the
/// image. Blank pages come back unchanged as [`CropOutcome::EmptyDrawing`].
pub fn auto_crop(img: &RawImage, cfg: &CropConfig) -> CropOutcome {
    let Some(bbox) = ink_bbox(img, cfg.ink_threshold) else {
        return CropOutcome::EmptyDrawing(img.clone());
    };
    let mx = (cfg.margin_fraction * bbox.width() as f64).ceil() as usize;
    let my = (cfg.margin_fraction * bbox.height() as f64).ceil() as usize;
    let rect = PixelRect {
        x0: bbox.x0.saturating_sub(mx),
        y0: bbox.y0.saturating_sub(my),
        x1: (bbox.x1 + mx).min(img.width),
        y1: (bbox.y1 + my).min(img.height),
    };
    CropOutcome::Cropped { image: img.sub_image(rect), rect }
}

/// Bilinear resize (half-pixel centers, edge clamped) followed by the
/// `1 - p/255` ink mapping.
pub fn resize_normalize(img: &RawImage, out_h: usize, out_w: usize) -> GrayTensor {
    assert_eq!(img.channels, 1, "resize_normalize expects a grey image");
    assert!(out_h > 0 && out_w > 0);
    let taps_y = bilinear_taps(img.height, out_h);
    let taps_x = bilinear_taps(img.width, out_w);
    let mut values = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &taps_y {
        for &(x0, x1, fx) in &taps_x {
            let p = |y: usize, x: usize| img.pixels[y * img.width + x] as f64;
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            let intensity = top * (1.0 - fy) + bottom * fy;
            values.push((1.0 - intensity / 255.0).clamp(0.0, 1.0) as f32);
        }
    }
    GrayTensor { height: out_h, width: out_w, values }
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Result of the full scan pipeline.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub tensor: GrayTensor,
    /// Set when the page had no ink and was resized uncropped.
    pub empty: bool,
}

/// decode → grey → crop → resize.
pub fn preprocess_bytes(bytes: &[u8], crop: &CropConfig, out_h: usize, out_w: usize) -> Result<Preprocessed, ImageError> {
    let raw = decode_image(bytes)?;
    Ok(preprocess(&raw, crop, out_h, out_w))
}

pub fn preprocess(raw: &RawImage, crop: &CropConfig, out_h: usize, out_w: usize) -> Preprocessed {
    let gray = to_gray(raw);
    let cropped = auto_crop(&gray, crop);
    let empty = cropped.is_empty();
    Preprocessed { tensor: resize_normalize(cropped.image(), out_h, out_w), empty }
}
