//! Exposure fusion: contrast / saturation / well-exposedness weights and
//! Laplacian-pyramid blending.
//!
//! Everything runs in floating point end to end; the result is clamped
//! exactly once after the pyramid collapse, and the ceil-halving pyramid
//! preserves odd dimensions, which together avoid the detail losses
//! common implementations show.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::kernels;

const WEIGHT_EPS: f32 = 1e-12;

/// Per-image weight maps, normalized so each pixel's weights sum to 1.
#[derive(Debug, Clone)]
pub struct WeightMaps {
    maps: Vec<ImageF>,
}

impl WeightMaps {
    /// Wrap raw single-channel maps, normalizing per pixel.
    pub fn from_raw(mut maps: Vec<ImageF>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::InvalidArgument("no weight maps".into()));
        }
        let (w, h) = (maps[0].width(), maps[0].height());
        for m in &maps {
            if m.width() != w || m.height() != h || m.channels() != 1 {
                return Err(Error::DimensionMismatch(
                    "weight maps must be single-channel and same-sized".into(),
                ));
            }
        }
        for i in 0..w * h {
            let sum: f32 = maps.iter().map(|m| m.data()[i]).sum();
            for m in &mut maps {
                m.data_mut()[i] /= sum;
            }
        }
        Ok(WeightMaps { maps })
    }

    pub fn maps(&self) -> &[ImageF] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Contrast term: absolute response of the 4-neighbor Laplacian on luma,
/// symmetric borders.
fn contrast(img: &ImageF) -> Vec<f32> {
    let (w, h) = (img.width(), img.height());
    let gray = img.to_gray();
    let g = gray.data();
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let xm = kernels::reflect(x as isize - 1, w);
            let xp = kernels::reflect(x as isize + 1, w);
            let ym = kernels::reflect(y as isize - 1, h);
            let yp = kernels::reflect(y as isize + 1, h);
            let lap = g[y * w + xm] + g[y * w + xp] + g[ym * w + x] + g[yp * w + x]
                - 4.0 * g[y * w + x];
            out[y * w + x] = lap.abs();
        }
    }
    out
}

/// Quality weights `(C + e)(S + e)(E + e)` per image, normalized per pixel.
pub fn compute_weights(stack: &[ImageF]) -> Result<WeightMaps> {
    if stack.is_empty() {
        return Err(Error::InvalidArgument("empty stack".into()));
    }
    let first = &stack[0];
    for img in stack {
        if !img.same_dims(first) {
            return Err(Error::DimensionMismatch(
                "stack images differ in shape".into(),
            ));
        }
    }
    let (w, h, ch) = (first.width(), first.height(), first.channels());
    let raw: Vec<ImageF> = stack
        .par_iter()
        .map(|img| {
            let c = contrast(img);
            let mut map = ImageF::new(w, h, 1);
            for i in 0..w * h {
                // Saturation: population std-dev across channels.
                let s = if ch == 1 {
                    0.0
                } else {
                    let px = &img.data()[i * ch..i * ch + ch];
                    let mean = px.iter().sum::<f32>() / ch as f32;
                    (px.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / ch as f32).sqrt()
                };
                // Well-exposedness: per-channel Gaussian around 0.5.
                let e: f32 = (0..ch)
                    .map(|cc| {
                        let v = img.data()[i * ch + cc] - 0.5;
                        (-(v * v) / (2.0 * 0.2 * 0.2)).exp()
                    })
                    .product();
                map.data_mut()[i] = (c[i] + WEIGHT_EPS) * (s + WEIGHT_EPS) * (e + WEIGHT_EPS);
            }
            map
        })
        .collect();
    WeightMaps::from_raw(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PyramidKind {
    Gaussian,
    Laplacian,
}

/// Image pyramid; level k+1 has ceil-half the dimensions of level k.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<ImageF>,
    pub kind: PyramidKind,
}

/// Deepest level count that still makes sense for a `w x h` image.
pub fn max_depth(w: usize, h: usize) -> usize {
    (w.min(h) as f32).log2().floor() as usize + 1
}

/// Default pyramid depth: `floor(log2(min(w, h))) - 1`, at least 1.
pub fn default_depth(w: usize, h: usize) -> usize {
    ((w.min(h) as f32).log2().floor() as usize).saturating_sub(1).max(1)
}

fn check_depth(img: &ImageF, depth: usize) -> Result<()> {
    if depth == 0 || depth > max_depth(img.width(), img.height()) {
        return Err(Error::InvalidArgument(format!(
            "pyramid depth {} infeasible for {}x{} (max {})",
            depth,
            img.width(),
            img.height(),
            max_depth(img.width(), img.height())
        )));
    }
    Ok(())
}

pub fn gaussian_pyramid(img: &ImageF, depth: usize) -> Result<Pyramid> {
    check_depth(img, depth)?;
    let mut levels = vec![img.clone()];
    for _ in 1..depth {
        levels.push(kernels::reduce_half(levels.last().unwrap()));
    }
    Ok(Pyramid {
        levels,
        kind: PyramidKind::Gaussian,
    })
}

pub fn laplacian_pyramid(img: &ImageF, depth: usize) -> Result<Pyramid> {
    let gauss = gaussian_pyramid(img, depth)?;
    let mut levels = Vec::with_capacity(depth);
    for i in 0..depth - 1 {
        let g = &gauss.levels[i];
        let up = kernels::expand_to(&gauss.levels[i + 1], g.width(), g.height());
        let diff: Vec<f32> = g
            .data()
            .iter()
            .zip(up.data())
            .map(|(a, b)| a - b)
            .collect();
        levels.push(ImageF::from_data(g.width(), g.height(), g.channels(), diff)?);
    }
    levels.push(gauss.levels[depth - 1].clone());
    Ok(Pyramid {
        levels,
        kind: PyramidKind::Laplacian,
    })
}

/// Reconstruct the image a Laplacian pyramid was built from.
pub fn collapse(pyr: &Pyramid) -> Result<ImageF> {
    if pyr.kind != PyramidKind::Laplacian {
        return Err(Error::InvalidArgument(
            "only Laplacian pyramids collapse".into(),
        ));
    }
    let mut acc = pyr.levels.last().unwrap().clone();
    for level in pyr.levels.iter().rev().skip(1) {
        let up = kernels::expand_to(&acc, level.width(), level.height());
        let sum: Vec<f32> = level
            .data()
            .iter()
            .zip(up.data())
            .map(|(a, b)| a + b)
            .collect();
        acc = ImageF::from_data(level.width(), level.height(), level.channels(), sum)?;
    }
    Ok(acc)
}

/// Fuse a stack level-wise: Laplacian of each image times the Gaussian of
/// its weight map, collapsed and clamped once at the end.
pub fn fuse(stack: &[ImageF], weights: &WeightMaps, depth: usize) -> Result<ImageF> {
    if stack.is_empty() {
        return Err(Error::InvalidArgument("empty stack".into()));
    }
    if stack.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} images vs {} weight maps",
            stack.len(),
            weights.len()
        )));
    }
    let first = &stack[0];
    check_depth(first, depth)?;
    let (w, h, ch) = (first.width(), first.height(), first.channels());
    for (img, map) in stack.iter().zip(weights.maps()) {
        if !img.same_dims(first) || map.width() != w || map.height() != h {
            return Err(Error::DimensionMismatch(
                "stack/weights shapes disagree".into(),
            ));
        }
    }
    for i in 0..w * h {
        let sum: f32 = weights.maps().iter().map(|m| m.data()[i]).sum();
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidArgument(format!(
                "weights not normalized at pixel {i}: sum {sum}"
            )));
        }
    }

    let pyramids: Vec<(Pyramid, Pyramid)> = stack
        .par_iter()
        .zip(weights.maps())
        .map(|(img, map)| {
            let lap = laplacian_pyramid(img, depth)?;
            let gw = gaussian_pyramid(map, depth)?;
            Ok((lap, gw))
        })
        .collect::<Result<_>>()?;

    // Level-wise weighted sum across images.
    let mut blended = Vec::with_capacity(depth);
    for level in 0..depth {
        let proto = &pyramids[0].0.levels[level];
        let (lw, lh) = (proto.width(), proto.height());
        let mut acc = vec![0.0f32; lw * lh * ch];
        for (lap, gw) in &pyramids {
            let l = lap.levels[level].data();
            let g = gw.levels[level].data();
            for i in 0..lw * lh {
                for c in 0..ch {
                    acc[i * ch + c] += l[i * ch + c] * g[i];
                }
            }
        }
        blended.push(ImageF::from_data(lw, lh, ch, acc)?);
    }

    let mut out = collapse(&Pyramid {
        levels: blended,
        kind: PyramidKind::Laplacian,
    })?;

    let (mut lo, mut hi) = (0.0f32, 1.0f32);
    for &v in out.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo < 0.0 || hi > 1.0 {
        log::debug!("fusion overshoot before final clamp: [{lo:.4}, {hi:.4}]");
    }
    out.clamp_in_place();
    Ok(out)
}
