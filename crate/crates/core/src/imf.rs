//! Intensity mapping functions between exposures, estimated by classic
//! histogram specification over 256 bins, per channel.
//!
//! Estimation needs no registration; it only sees histograms, so it is
//! driven by the unwarped originals. Applying the curve of `reference ->
//! input_k` to the reference yields the latent image the flow and
//! PatchMatch stages align against.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{quantize, ImageF};

const BINS: usize = 256;

/// Monotone per-channel lookup from 8-bit source level to target
/// intensity in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct LookupCurve {
    tables: Vec<[f32; BINS]>,
}

impl LookupCurve {
    pub fn channels(&self) -> usize {
        self.tables.len()
    }

    pub fn table(&self, channel: usize) -> &[f32; BINS] {
        &self.tables[channel]
    }

    /// The identity mapping (level i -> i/255) for the given channel count.
    pub fn identity(channels: usize) -> Self {
        let mut t = [0.0f32; BINS];
        for (i, v) in t.iter_mut().enumerate() {
            *v = i as f32 / 255.0;
        }
        LookupCurve {
            tables: vec![t; channels],
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.tables
            .iter()
            .all(|t| t.windows(2).all(|w| w[0] <= w[1]))
    }
}

/// Estimate the curve mapping `source` intensities onto `target`'s
/// histogram (CDF matching; ties map to the lowest target level whose CDF
/// reaches the source CDF). Monotone by construction.
pub fn estimate_imf(source: &ImageF, target: &ImageF) -> Result<LookupCurve> {
    if source.channels() != target.channels() {
        return Err(Error::DimensionMismatch(format!(
            "imf channel mismatch: {} vs {}",
            source.channels(),
            target.channels()
        )));
    }
    let ch = source.channels();
    let mut tables = Vec::with_capacity(ch);
    for c in 0..ch {
        let cdf_s = cdf(source, c);
        let cdf_t = cdf(target, c);
        let mut table = [0.0f32; BINS];
        let mut j = 0usize;
        for i in 0..BINS {
            while j + 1 < BINS && cdf_t[j] < cdf_s[i] {
                j += 1;
            }
            table[i] = j as f32 / 255.0;
        }
        tables.push(table);
    }
    Ok(LookupCurve { tables })
}

fn cdf(img: &ImageF, channel: usize) -> [f64; BINS] {
    let mut hist = [0u64; BINS];
    let ch = img.channels();
    for px in img.data().chunks_exact(ch) {
        hist[quantize(px[channel]) as usize] += 1;
    }
    let total = (img.width() * img.height()) as f64;
    let mut out = [0.0f64; BINS];
    let mut cum = 0u64;
    for i in 0..BINS {
        cum += hist[i];
        out[i] = cum as f64 / total;
    }
    out
}

/// Apply a lookup curve: every sample is quantized to its 256-bin index
/// and replaced by the table value.
pub fn apply_imf(img: &ImageF, curve: &LookupCurve) -> Result<ImageF> {
    if img.channels() != curve.channels() {
        return Err(Error::DimensionMismatch(format!(
            "curve has {} channels, image has {}",
            curve.channels(),
            img.channels()
        )));
    }
    let ch = img.channels();
    let data = img
        .data()
        .chunks_exact(ch)
        .flat_map(|px| {
            (0..ch).map(move |c| curve.tables[c][quantize(px[c]) as usize])
        })
        .collect();
    ImageF::from_data(img.width(), img.height(), ch, data)
}

/// Dump the curve as CSV (one row per level: level, then one column per
/// channel) for debugging.
pub fn save_curve_csv(curve: &LookupCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for i in 0..BINS {
        let row: Vec<String> = std::iter::once(i.to_string())
            .chain(curve.tables.iter().map(|t| format!("{:.6}", t[i])))
            .collect();
        writeln!(w, "{}", row.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
