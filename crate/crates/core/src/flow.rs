//! Dense optical flow for coarse registration, plus flow-field warping.
//!
//! The estimator is a coarse-to-fine dense inverse search: a factor-2
//! grayscale pyramid, overlapping square patches registered by
//! inverse-compositional gradient descent at each level, and densification
//! by residual-weighted averaging of patch displacements. There is no
//! variational refinement; residual errors are the job of the downstream
//! superpixel error detector.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::kernels;

/// Per-pixel 2D displacement field. `moving(x + u, y + v) ≈ fixed(x, y)`.
#[derive(Debug, Clone)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn zero(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn from_planes(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "flow planes of {} / {} values for a {}x{} grid",
                u.len(),
                v.len(),
                width,
                height
            )));
        }
        Ok(FlowField { width, height, u, v })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }

    /// Largest |u| or |v| component.
    pub fn max_abs(&self) -> f32 {
        self.u
            .iter()
            .chain(self.v.iter())
            .fold(0.0f32, |m, x| m.max(x.abs()))
    }
}

/// Tuning for [`compute_flow`]. Defaults follow the patch-based inverse
/// search the pipeline was built around.
#[derive(Debug, Clone)]
pub struct FlowParams {
    /// Square patch side at every pyramid level.
    pub patch_size: usize,
    /// Patch grid stride (overlap = patch_size - stride).
    pub stride: usize,
    /// Gradient-descent iteration cap per patch.
    pub max_iterations: usize,
    /// Stop when the update norm falls below this (pixels).
    pub convergence_eps: f32,
    /// Pyramid depth is chosen so the coarsest short side stays >= this.
    pub min_coarse_size: usize,
    /// Patches with mean squared gradient below this are skipped and
    /// filled by densification only.
    pub min_grad_energy: f32,
    /// Hard bound on output displacement magnitude per component.
    pub max_displacement: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            patch_size: 8,
            stride: 4,
            max_iterations: 12,
            convergence_eps: 0.01,
            min_coarse_size: 32,
            min_grad_energy: 1e-4,
            max_displacement: 128.0,
        }
    }
}

struct PatchResult {
    x0: usize,
    y0: usize,
    u: f32,
    v: f32,
    weight: f32,
}

/// Estimate a dense displacement field aligning `moving` to `fixed`.
///
/// Both images are converted to luma internally. Deterministic: there is
/// no randomized step, and densification accumulates in patch order.
pub fn compute_flow(moving: &ImageF, fixed: &ImageF, params: &FlowParams) -> Result<FlowField> {
    if moving.width() != fixed.width() || moving.height() != fixed.height() {
        return Err(Error::DimensionMismatch(format!(
            "flow pair {}x{} vs {}x{}",
            moving.width(),
            moving.height(),
            fixed.width(),
            fixed.height()
        )));
    }
    if params.patch_size < 2 || params.stride == 0 || params.stride > params.patch_size {
        return Err(Error::InvalidArgument(
            "flow patch_size must be >= 2 and stride in [1, patch_size]".into(),
        ));
    }
    let short = moving.width().min(moving.height());
    if short < params.patch_size {
        return Err(Error::InvalidArgument(format!(
            "image short side {} is smaller than the coarsest pyramid patch {}",
            short, params.patch_size
        )));
    }

    let gm = moving.to_gray();
    let gf = fixed.to_gray();

    // Factor-2 pyramid; keep halving while the next level still has
    // min_coarse_size on its short side.
    let mut pyr_m = vec![gm];
    let mut pyr_f = vec![gf];
    loop {
        let last = pyr_m.last().unwrap();
        let (nw, nh) = (
            kernels::half_dim(last.width()),
            kernels::half_dim(last.height()),
        );
        if nw.min(nh) < params.min_coarse_size {
            break;
        }
        pyr_m.push(kernels::reduce_half(pyr_m.last().unwrap()));
        pyr_f.push(kernels::reduce_half(pyr_f.last().unwrap()));
    }

    let coarsest = pyr_m.len() - 1;
    let mut u = vec![0.0f32; pyr_m[coarsest].width() * pyr_m[coarsest].height()];
    let mut v = u.clone();

    for level in (0..=coarsest).rev() {
        let fm = &pyr_m[level];
        let ff = &pyr_f[level];
        let (w, h) = (fm.width(), fm.height());
        if level != coarsest {
            let (pw, ph) = (pyr_m[level + 1].width(), pyr_m[level + 1].height());
            u = kernels::resize_plane_bilinear(&u, pw, ph, w, h);
            v = kernels::resize_plane_bilinear(&v, pw, ph, w, h);
            for x in u.iter_mut().chain(v.iter_mut()) {
                *x *= 2.0;
            }
        }

        let results = register_level(fm, ff, &u, &v, params);
        densify(&results, params.patch_size, &mut u, &mut v, w);

        // Per-level displacement bound (scales up by 2 per finer level).
        let cap = params.max_displacement / (1u32 << level) as f32;
        for x in u.iter_mut().chain(v.iter_mut()) {
            if !x.is_finite() {
                *x = 0.0;
            }
            *x = x.clamp(-cap, cap);
        }
    }

    FlowField::from_planes(moving.width(), moving.height(), u, v)
}

/// Patch anchor positions covering [0, dim - patch] with the given stride,
/// always including the flush-to-border anchor.
fn patch_anchors(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut xs: Vec<usize> = (0..=last).step_by(stride).collect();
    if *xs.last().unwrap() != last {
        xs.push(last);
    }
    xs
}

fn register_level(
    moving: &ImageF,
    fixed: &ImageF,
    init_u: &[f32],
    init_v: &[f32],
    params: &FlowParams,
) -> Vec<PatchResult> {
    let (w, h) = (fixed.width(), fixed.height());
    let ps = params.patch_size;
    let n = (ps * ps) as f32;
    let level_cap = (w.max(h)) as f32;

    // Central-difference gradients of the fixed image.
    let fx: Vec<f32> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            0.5 * (fixed.at(xp, y, 0) - fixed.at(xm, y, 0))
        })
        .collect();
    let fy: Vec<f32> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            0.5 * (fixed.at(x, yp, 0) - fixed.at(x, ym, 0))
        })
        .collect();

    let xs = patch_anchors(w, ps, params.stride);
    let ys = patch_anchors(h, ps, params.stride);
    let anchors: Vec<(usize, usize)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();

    // Patches are independent; collect preserves anchor order so the
    // densification pass is deterministic under any thread count.
    anchors
        .par_iter()
        .filter_map(|&(x0, y0)| {
            register_patch(moving, fixed, &fx, &fy, x0, y0, init_u, init_v, params, n, level_cap)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn register_patch(
    moving: &ImageF,
    fixed: &ImageF,
    fx: &[f32],
    fy: &[f32],
    x0: usize,
    y0: usize,
    init_u: &[f32],
    init_v: &[f32],
    params: &FlowParams,
    n: f32,
    level_cap: f32,
) -> Option<PatchResult> {
    let w = fixed.width();
    let ps = params.patch_size;

    // Template Hessian from fixed-image gradients (inverse compositional:
    // computed once per patch).
    let mut h11 = 0.0f32;
    let mut h12 = 0.0f32;
    let mut h22 = 0.0f32;
    for py in 0..ps {
        for px in 0..ps {
            let i = (y0 + py) * w + (x0 + px);
            h11 += fx[i] * fx[i];
            h12 += fx[i] * fy[i];
            h22 += fy[i] * fy[i];
        }
    }
    let grad_energy = (h11 + h22) / n;
    if grad_energy < params.min_grad_energy {
        return None;
    }
    let det = h11 * h22 - h12 * h12;
    if det.abs() < 1e-12 {
        return None;
    }

    let cx = x0 + ps / 2;
    let cy = y0 + ps / 2;
    let mut pu = init_u[cy * w + cx];
    let mut pv = init_v[cy * w + cx];
    let (iu, iv) = (pu, pv);

    let mut mean_abs_r = f32::MAX;
    for _ in 0..params.max_iterations {
        let mut bx = 0.0f32;
        let mut by = 0.0f32;
        let mut abs_r = 0.0f32;
        for py in 0..ps {
            for px in 0..ps {
                let gx_ = (x0 + px) as f32;
                let gy_ = (y0 + py) as f32;
                let i = (y0 + py) * w + (x0 + px);
                let r = kernels::bilinear_clamped(moving, gx_ + pu, gy_ + pv, 0)
                    - fixed.at(x0 + px, y0 + py, 0);
                bx += fx[i] * r;
                by += fy[i] * r;
                abs_r += r.abs();
            }
        }
        mean_abs_r = abs_r / n;
        let du = (h22 * bx - h12 * by) / det;
        let dv = (h11 * by - h12 * bx) / det;
        if !du.is_finite() || !dv.is_finite() {
            pu = iu;
            pv = iv;
            break;
        }
        pu -= du;
        pv -= dv;
        if pu.abs() > level_cap || pv.abs() > level_cap {
            pu = pu.clamp(-level_cap, level_cap);
            pv = pv.clamp(-level_cap, level_cap);
        }
        if (du * du + dv * dv).sqrt() < params.convergence_eps {
            break;
        }
    }

    // Final residual at the converged displacement drives the vote weight;
    // expressed in 8-bit intensity levels.
    if mean_abs_r == f32::MAX {
        let mut abs_r = 0.0f32;
        for py in 0..ps {
            for px in 0..ps {
                let r = kernels::bilinear_clamped(moving, (x0 + px) as f32 + pu, (y0 + py) as f32 + pv, 0)
                    - fixed.at(x0 + px, y0 + py, 0);
                abs_r += r.abs();
            }
        }
        mean_abs_r = abs_r / n;
    }
    let weight = (-mean_abs_r * 255.0).exp();

    Some(PatchResult {
        x0,
        y0,
        u: pu,
        v: pv,
        weight,
    })
}

/// Scatter patch displacements into per-pixel flow by weighted averaging.
/// Pixels covered by no surviving patch keep their initialization.
fn densify(results: &[PatchResult], ps: usize, u: &mut [f32], v: &mut [f32], w: usize) {
    let mut wsum = vec![0.0f32; u.len()];
    let mut usum = vec![0.0f32; u.len()];
    let mut vsum = vec![0.0f32; u.len()];
    for r in results {
        for py in 0..ps {
            let row = (r.y0 + py) * w + r.x0;
            for i in row..row + ps {
                wsum[i] += r.weight;
                usum[i] += r.weight * r.u;
                vsum[i] += r.weight * r.v;
            }
        }
    }
    for i in 0..u.len() {
        if wsum[i] > 0.0 {
            u[i] = usum[i] / wsum[i];
            v[i] = vsum[i] / wsum[i];
        }
    }
}

/// Warp an image by a flow field: `out(x, y) = img(x + u, y + v)` with
/// bilinear sampling and border clamping.
pub fn warp(img: &ImageF, flow: &FlowField) -> Result<ImageF> {
    if img.width() != flow.width() || img.height() != flow.height() {
        return Err(Error::DimensionMismatch(format!(
            "warp image {}x{} vs flow {}x{}",
            img.width(),
            img.height(),
            flow.width(),
            flow.height()
        )));
    }
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = ImageF::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(x, y);
            for c in 0..ch {
                let s = if u == 0.0 && v == 0.0 {
                    img.at(x, y, c)
                } else {
                    kernels::bilinear_clamped(img, x as f32 + u, y as f32 + v, c)
                };
                out.set(x, y, c, s);
            }
        }
    }
    Ok(out)
}

const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// Write a flow field in the two-plane little-endian `.flo` layout
/// (magic "PIEH", i32 width, i32 height, interleaved u,v f32 pairs).
pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(FLO_MAGIC).map_err(io_err)?;
    w.write_all(&(flow.width() as i32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(flow.height() as i32).to_le_bytes()).map_err(io_err)?;
    for i in 0..flow.width() * flow.height() {
        w.write_all(&flow.u[i].to_le_bytes()).map_err(io_err)?;
        w.write_all(&flow.v[i].to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

/// Endpoint error statistics of a flow field against a constant ground
/// truth, evaluated on the interior (a `margin`-wide border is ignored).
pub fn endpoint_errors(flow: &FlowField, gt: (f32, f32), margin: usize) -> Vec<f32> {
    let mut errs = Vec::new();
    for y in margin..flow.height().saturating_sub(margin) {
        for x in margin..flow.width().saturating_sub(margin) {
            let (u, v) = flow.at(x, y);
            errs.push(((u - gt.0).powi(2) + (v - gt.1).powi(2)).sqrt());
        }
    }
    errs
}

/// Read a `.flo` file written by [`write_flo`].
pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() < 12 || &raw[..4] != FLO_MAGIC {
        return Err(Error::Format(format!("{}: not a .flo file", path.display())));
    }
    let w = i32::from_le_bytes(raw[4..8].try_into().unwrap()) as usize;
    let h = i32::from_le_bytes(raw[8..12].try_into().unwrap()) as usize;
    let need = 12 + w * h * 8;
    if raw.len() < need {
        return Err(Error::Format(format!("{}: truncated .flo", path.display())));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let off = 12 + i * 8;
        u.push(f32::from_le_bytes(raw[off..off + 4].try_into().unwrap()));
        v.push(f32::from_le_bytes(raw[off + 4..off + 8].try_into().unwrap()));
    }
    FlowField::from_planes(w, h, u, v)
}
