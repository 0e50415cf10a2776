//! Image containers and 8-bit file I/O.
//!
//! All processing happens on [`ImageF`], a row-major floating-point raster
//! with samples in `[0, 1]`. Storage formats are 8-bit PNG and binary
//! PPM (P6) / PGM (P5); quantization on save is
//! `byte = round(clamp(s, 0, 1) * 255)` with halves rounding away from zero.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Floating-point multi-channel raster, samples in `[0, 1]`, row-major,
/// channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageF {
    /// All-zero image. `channels` must be 1 or 3.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(
            channels == 1 || channels == 3,
            "channel count must be 1 or 3, got {channels}"
        );
        assert!(width > 0 && height > 0, "empty image");
        ImageF {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Wrap an existing sample buffer. Length must be `w*h*channels`.
    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "buffer holds {} samples, {}x{}x{} needs {}",
                data.len(),
                width,
                height,
                channels,
                width * height * channels
            )));
        }
        Ok(ImageF {
            width,
            height,
            channels,
            data,
        })
    }

    /// Build per-pixel from a closure returning one value per channel.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = ImageF::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f(x, y, c);
                    img.data[(y * width + x) * channels + c] = v;
                }
            }
        }
        img
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims(&self, other: &ImageF) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Copy a rectangle out of the image. The rect must be inside bounds.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> ImageF {
        assert!(x0 + w <= self.width && y0 + h <= self.height && w > 0 && h > 0);
        let mut out = ImageF::new(w, h, self.channels);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * self.channels;
            let dst = y * w * self.channels;
            out.data[dst..dst + w * self.channels]
                .copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        out
    }

    /// Mean of the luma channel, used by order sanity checks.
    pub fn mean_luma(&self) -> f32 {
        let n = (self.width * self.height) as f64;
        let mut sum = 0.0f64;
        for y in 0..self.height {
            for x in 0..self.width {
                sum += self.luma(x, y) as f64;
            }
        }
        (sum / n) as f32
    }

    /// Rec. 601 luma of one pixel; identity for single-channel images.
    #[inline]
    pub fn luma(&self, x: usize, y: usize) -> f32 {
        if self.channels == 1 {
            self.at(x, y, 0)
        } else {
            0.299 * self.at(x, y, 0) + 0.587 * self.at(x, y, 1) + 0.114 * self.at(x, y, 2)
        }
    }

    /// Single-channel luma image (Y = 0.299 R + 0.587 G + 0.114 B).
    pub fn to_gray(&self) -> ImageF {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = ImageF::new(self.width, self.height, 1);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, 0, self.luma(x, y));
            }
        }
        out
    }

    /// Clamp every sample into `[0, 1]` in place.
    pub fn clamp_in_place(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Rect { x0, y0, w, h }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// 8-bit quantization: round half away from zero after clamping.
#[inline]
pub fn quantize(s: f32) -> u8 {
    (s.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Inverse of [`quantize`]: exact byte / 255.
#[inline]
pub fn dequantize(b: u8) -> f32 {
    f32::from(b) / 255.0
}

/// Ordered exposure stack (low to high exposure) with a reference index.
///
/// Ordering is taken from the caller; it is never inferred from content.
#[derive(Debug, Clone)]
pub struct ExposureStack {
    images: Vec<ImageF>,
    ref_index: usize,
}

impl ExposureStack {
    pub fn new(images: Vec<ImageF>, ref_index: usize) -> Result<Self> {
        if images.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an exposure stack needs at least 2 images, got {}",
                images.len()
            )));
        }
        if ref_index >= images.len() {
            return Err(Error::InvalidArgument(format!(
                "reference index {} out of range for {} images",
                ref_index,
                images.len()
            )));
        }
        let first = &images[0];
        for (k, img) in images.iter().enumerate().skip(1) {
            if !img.same_dims(first) {
                return Err(Error::DimensionMismatch(format!(
                    "image {} is {}x{}x{}, image 0 is {}x{}x{}",
                    k,
                    img.width(),
                    img.height(),
                    img.channels(),
                    first.width(),
                    first.height(),
                    first.channels()
                )));
            }
        }
        Ok(ExposureStack { images, ref_index })
    }

    pub fn images(&self) -> &[ImageF] {
        &self.images
    }

    pub fn into_images(self) -> Vec<ImageF> {
        self.images
    }

    pub fn ref_index(&self) -> usize {
        self.ref_index
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn reference(&self) -> &ImageF {
        &self.images[self.ref_index]
    }

    /// True when mean luminances are nondecreasing in stack order.
    pub fn luma_order_is_monotone(&self) -> bool {
        let lumas: Vec<f32> = self.images.iter().map(|i| i.mean_luma()).collect();
        lumas.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Load an 8-bit PNG, PPM (P6) or PGM (P5) file as samples in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageF> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => load_png(path),
        "ppm" | "pgm" | "pnm" => load_pnm(path),
        other => Err(Error::Format(format!(
            "unsupported image extension `{other}` (use .png, .ppm or .pgm)"
        ))),
    }
}

/// Save as 8-bit PNG, PPM or PGM depending on the extension.
pub fn save_image(img: &ImageF, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => save_png(img, path),
        "ppm" | "pgm" | "pnm" => save_pnm(img, path),
        other => Err(Error::Format(format!(
            "unsupported image extension `{other}` (use .png, .ppm or .pgm)"
        ))),
    }
}

/// Load an ordered stack from paths; all images must share dimensions.
pub fn load_stack(paths: &[impl AsRef<Path>], ref_index: usize) -> Result<ExposureStack> {
    let images: Vec<ImageF> = paths
        .iter()
        .map(load_image)
        .collect::<Result<Vec<_>>>()?;
    ExposureStack::new(images, ref_index)
}

fn load_png(path: &Path) -> Result<ImageF> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: only 8-bit PNG is supported, got {:?}",
            path.display(),
            info.bit_depth
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported PNG color type {:?} (use 8-bit gray or RGB)",
                path.display(),
                other
            )))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..w * h * channels].iter().map(|&b| dequantize(b)).collect();
    ImageF::from_data(w, h, channels, data)
}

fn save_png(img: &ImageF, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    encoder.set_color(if img.channels() == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let bytes: Vec<u8> = img.data().iter().map(|&s| quantize(s)).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    Ok(())
}

fn load_pnm(path: &Path) -> Result<ImageF> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));

    if raw.len() < 2 {
        return Err(bad("truncated header"));
    }
    let channels = match &raw[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(bad("expected binary PGM (P5) or PPM (P6) magic")),
    };

    // Header: magic, width, height, maxval — whitespace separated, with
    // `#` comments allowed between tokens.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < raw.len() {
            match raw[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < raw.len() && raw[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < raw.len() && raw[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        *field = std::str::from_utf8(&raw[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!(
            "only 8-bit (maxval 255) is supported, got maxval {maxval}"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= raw.len() || !raw[pos].is_ascii_whitespace() {
        return Err(bad("missing raster separator"));
    }
    pos += 1;
    let need = width * height * channels;
    if raw.len() < pos + need {
        return Err(bad("truncated raster"));
    }
    let data = raw[pos..pos + need].iter().map(|&b| dequantize(b)).collect();
    ImageF::from_data(width, height, channels, data)
}

fn save_pnm(img: &ImageF, path: &Path) -> Result<()> {
    if img.channels() != 1 && img.channels() != 3 {
        return Err(Error::Format("PNM supports 1 or 3 channels".into()));
    }
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "{magic}\n{} {}\n255\n", img.width(), img.height())
        .map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = img.data().iter().map(|&s| quantize(s)).collect();
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write a label raster as a 16-bit big-endian PGM (diagnostic dump).
pub fn save_pgm16(labels: &[u32], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(labels.len(), width * height);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n65535\n").map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(labels.len() * 2);
    for &l in labels {
        let v = l.min(65535) as u16;
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        assert_eq!(quantize(0.5), 128); // 127.5 -> 128
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(0.337), 86); // round(85.935)
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
    }

    #[test]
    fn png_round_trip_extremes() {
        let dir = tempfile::tempdir().unwrap();
        for (byte, val) in [(255u8, 1.0f32), (0u8, 0.0f32)] {
            let img = ImageF::from_data(1, 1, 1, vec![val]).unwrap();
            let p = dir.path().join(format!("px{byte}.png"));
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.data(), &[val]);
        }
    }

    #[test]
    fn pgm_bytes_map_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        std::fs::write(&p, [b"P5\n2 2\n255\n".as_slice(), &[0u8, 128, 255, 64]].concat()).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.data(), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn ppm_round_trip_matches_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageF::from_data(2, 1, 3, vec![0.1, 0.5, 0.9, 0.337, 0.0, 1.0]).unwrap();
        let p = dir.path().join("c.ppm");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        for (orig, round) in img.data().iter().zip(back.data()) {
            assert_eq!(quantize(*orig), quantize(*round));
            assert_eq!(*round, dequantize(quantize(*orig)));
        }
    }

    #[test]
    fn stack_rejects_mismatched_and_bad_ref() {
        let a = ImageF::new(4, 4, 3);
        let b = ImageF::new(4, 5, 3);
        assert!(ExposureStack::new(vec![a.clone(), b], 0).is_err());
        assert!(ExposureStack::new(vec![a.clone(), a.clone()], 2).is_err());
        assert!(ExposureStack::new(vec![a.clone()], 0).is_err());
        assert!(ExposureStack::new(vec![a.clone(), a], 1).is_ok());
    }

    #[test]
    fn load_stack_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        // Deliberately written bright-to-dark; order must be kept as given.
        for (i, v) in [0.9f32, 0.1, 0.5].iter().enumerate() {
            let img = ImageF::from_data(2, 2, 1, vec![*v; 4]).unwrap();
            let p = dir.path().join(format!("{i}.png"));
            save_image(&img, &p).unwrap();
            paths.push(p);
        }
        let stack = load_stack(&paths, 1).unwrap();
        assert!(stack.images()[0].data()[0] > stack.images()[1].data()[0]);
        assert!(!stack.luma_order_is_monotone());
        assert_eq!(stack.ref_index(), 1);
    }

    #[test]
    fn gray_conversion_weights() {
        let img = ImageF::from_data(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((img.to_gray().at(0, 0, 0) - 0.299).abs() < 1e-6);
    }

    proptest! {
        // Quantize -> dequantize -> quantize is idempotent on [0, 1].
        #[test]
        fn quantize_idempotent(x in 0.0f32..=1.0) {
            let q = quantize(x);
            prop_assert_eq!(quantize(dequantize(q)), q);
        }
    }
}
