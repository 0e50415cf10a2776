//! Windowed PatchMatch correction of misregistered superpixels.
//!
//! For a flagged superpixel, a nearest-neighbor field is searched inside a
//! window of twice the superpixel's bounding box: target patches come from
//! the IMF-adjusted reference (structure to reproduce), source patches
//! from the flow-warped input (pixels to reuse, keeping the input's
//! exposure). The NNF is the classic randomized scheme: random init, then
//! alternating scan passes of neighbor propagation and radius-halving
//! random search. Reconstruction averages all patch votes per pixel and is
//! blended back over the label with a short feather.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{ImageF, Rect};
use crate::superpixel::SuperpixelMap;

/// PatchMatch tuning.
#[derive(Debug, Clone)]
pub struct PatchParams {
    /// Odd patch side, >= 3.
    pub patch_size: usize,
    /// Propagation + random-search passes.
    pub iterations: usize,
    /// RNG seed; the whole correction is deterministic given it.
    pub seed: u64,
    /// Search window size as a multiple of the superpixel bounding box.
    pub window_scale: f32,
    /// Feather the corrected region over a 2 px band at the label
    /// boundary. Disable to keep writes strictly inside the label.
    pub feather: bool,
}

impl Default for PatchParams {
    fn default() -> Self {
        PatchParams {
            patch_size: 7,
            iterations: 5,
            seed: 1,
            window_scale: 2.0,
            feather: true,
        }
    }
}

impl PatchParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "patch_size must be odd and >= 3, got {}",
                self.patch_size
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if self.window_scale < 1.0 {
            return Err(Error::InvalidArgument(
                "window_scale must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Nearest-neighbor field over patch anchor positions.
///
/// `offsets[i]` maps target anchor i to `anchor + offset` in the source;
/// every mapped patch lies fully inside the source region. `costs[i]` is
/// the SSD at that offset.
#[derive(Debug, Clone)]
pub struct NNField {
    /// Search rectangle in the coordinates of the image the offsets
    /// index into (the full source extent for a standalone search).
    pub region: Rect,
    /// Anchor grid dimensions: (target_w - patch + 1, target_h - patch + 1).
    pub grid_w: usize,
    pub grid_h: usize,
    pub offsets: Vec<(i32, i32)>,
    pub costs: Vec<f32>,
}

/// SSD between a target patch and a source patch, bailing out early once
/// the partial sum reaches `bail`.
#[inline]
fn patch_cost(
    target: &ImageF,
    source: &ImageF,
    tax: usize,
    tay: usize,
    sax: usize,
    say: usize,
    ps: usize,
    bail: f32,
) -> f32 {
    let ch = target.channels();
    let (tw, sw) = (target.width(), source.width());
    let td = target.data();
    let sd = source.data();
    let mut acc = 0.0f32;
    for py in 0..ps {
        let trow = ((tay + py) * tw + tax) * ch;
        let srow = ((say + py) * sw + sax) * ch;
        for k in 0..ps * ch {
            let d = td[trow + k] - sd[srow + k];
            acc += d * d;
        }
        if acc >= bail {
            return acc;
        }
    }
    acc
}

/// Randomized NNF search from `target` patches into `source`.
pub fn nnf_search(target: &ImageF, source: &ImageF, params: &PatchParams) -> Result<NNField> {
    nnf_search_traced(target, source, params).map(|(f, _)| f)
}

/// Like [`nnf_search`] but also returns the per-anchor cost vector after
/// initialization and after every iteration (for convergence checks).
pub fn nnf_search_traced(
    target: &ImageF,
    source: &ImageF,
    params: &PatchParams,
) -> Result<(NNField, Vec<Vec<f32>>)> {
    params.validate()?;
    let ps = params.patch_size;
    if target.channels() != source.channels() {
        return Err(Error::DimensionMismatch(
            "nnf target/source channel mismatch".into(),
        ));
    }
    if target.width() < ps || target.height() < ps || source.width() < ps || source.height() < ps {
        return Err(Error::InvalidArgument(format!(
            "regions must fit at least one {ps}x{ps} patch"
        )));
    }

    let grid_w = target.width() - ps + 1;
    let grid_h = target.height() - ps + 1;
    let smax_x = (source.width() - ps) as i32;
    let smax_y = (source.height() - ps) as i32;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut offsets = vec![(0i32, 0i32); grid_w * grid_h];
    let mut costs = vec![0.0f32; grid_w * grid_h];

    for ay in 0..grid_h {
        for ax in 0..grid_w {
            let sax = rng.random_range(0..=smax_x);
            let say = rng.random_range(0..=smax_y);
            let i = ay * grid_w + ax;
            offsets[i] = (sax - ax as i32, say - ay as i32);
            costs[i] = patch_cost(target, source, ax, ay, sax as usize, say as usize, ps, f32::MAX);
        }
    }

    let mut history = vec![costs.clone()];
    let radius0 = source.width().max(source.height()) as i32;

    for it in 0..params.iterations {
        let forward = it % 2 == 0;
        let idx: Box<dyn Iterator<Item = usize>> = if forward {
            Box::new(0..grid_w * grid_h)
        } else {
            Box::new((0..grid_w * grid_h).rev())
        };
        for i in idx {
            let ax = i % grid_w;
            let ay = i / grid_w;

            let mut consider = |cand: (i32, i32),
                                offsets: &mut Vec<(i32, i32)>,
                                costs: &mut Vec<f32>| {
                let sax = (ax as i32 + cand.0).clamp(0, smax_x);
                let say = (ay as i32 + cand.1).clamp(0, smax_y);
                let eff = (sax - ax as i32, say - ay as i32);
                if eff == offsets[i] {
                    return;
                }
                let c = patch_cost(
                    target,
                    source,
                    ax,
                    ay,
                    sax as usize,
                    say as usize,
                    ps,
                    costs[i],
                );
                if c < costs[i] {
                    costs[i] = c;
                    offsets[i] = eff;
                }
            };

            // Propagation: adopt the scan-neighbors' offsets.
            if forward {
                if ax > 0 {
                    let n = offsets[i - 1];
                    consider(n, &mut offsets, &mut costs);
                }
                if ay > 0 {
                    let n = offsets[i - grid_w];
                    consider(n, &mut offsets, &mut costs);
                }
            } else {
                if ax + 1 < grid_w {
                    let n = offsets[i + 1];
                    consider(n, &mut offsets, &mut costs);
                }
                if ay + 1 < grid_h {
                    let n = offsets[i + grid_w];
                    consider(n, &mut offsets, &mut costs);
                }
            }

            // Random search around the current offset, radius halving
            // from the window size down to 1.
            let mut radius = radius0;
            while radius >= 1 {
                let base = offsets[i];
                let cand = (
                    base.0 + rng.random_range(-radius..=radius),
                    base.1 + rng.random_range(-radius..=radius),
                );
                consider(cand, &mut offsets, &mut costs);
                radius /= 2;
            }
        }
        history.push(costs.clone());
    }

    Ok((
        NNField {
            region: Rect::new(0, 0, source.width(), source.height()),
            grid_w,
            grid_h,
            offsets,
            costs,
        },
        history,
    ))
}

/// Average all patch votes into a target-shaped reconstruction: each
/// anchor's matched source patch votes its pixels onto the pixels the
/// target patch covers. Every pixel is covered by at least one anchor.
fn vote_reconstruct(source: &ImageF, nnf: &NNField, tw: usize, th: usize, ps: usize) -> ImageF {
    let ch = source.channels();
    let mut acc = vec![0.0f32; tw * th * ch];
    let mut cnt = vec![0u32; tw * th];
    for ay in 0..nnf.grid_h {
        for ax in 0..nnf.grid_w {
            let (dx, dy) = nnf.offsets[ay * nnf.grid_w + ax];
            let sax = (ax as i32 + dx) as usize;
            let say = (ay as i32 + dy) as usize;
            for py in 0..ps {
                for px in 0..ps {
                    let ti = (ay + py) * tw + ax + px;
                    cnt[ti] += 1;
                    for c in 0..ch {
                        acc[ti * ch + c] += source.at(sax + px, say + py, c);
                    }
                }
            }
        }
    }
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &v)| v / cnt[i / ch] as f32)
        .collect();
    ImageF::from_data(tw, th, ch, data).expect("sized above")
}

/// Window of `window_scale` times the bbox, centered on it, clipped to
/// the image.
fn correction_window(bbox: Rect, scale: f32, w: usize, h: usize) -> Rect {
    let extra_w = ((scale - 1.0) * bbox.w as f32).round() as usize;
    let extra_h = ((scale - 1.0) * bbox.h as f32).round() as usize;
    let x0 = bbox.x0.saturating_sub(extra_w / 2);
    let y0 = bbox.y0.saturating_sub(extra_h / 2);
    let x1 = (bbox.x0 + bbox.w + extra_w.div_ceil(2)).min(w);
    let y1 = (bbox.y0 + bbox.h + extra_h.div_ceil(2)).min(h);
    Rect::new(x0, y0, x1 - x0, y1 - y0)
}

/// Re-synthesize one flagged superpixel of `warped` by PatchMatch against
/// `latent_ref`, returning a copy of `warped` with the label replaced.
///
/// Pixels outside the label are untouched when feathering is off; with
/// feathering, a 2 px blend band straddles the label boundary.
pub fn correct_superpixel(
    warped: &ImageF,
    latent_ref: &ImageF,
    sp: &SuperpixelMap,
    label: usize,
    params: &PatchParams,
) -> Result<ImageF> {
    params.validate()?;
    if !warped.same_dims(latent_ref) {
        return Err(Error::DimensionMismatch(
            "warped and latent reference differ in shape".into(),
        ));
    }
    if warped.width() != sp.width() || warped.height() != sp.height() {
        return Err(Error::DimensionMismatch(
            "superpixel map does not match the image grid".into(),
        ));
    }
    if label >= sp.count() {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range ({} labels)",
            label,
            sp.count()
        )));
    }

    let (w, h) = (warped.width(), warped.height());
    let ps = params.patch_size;
    let win = correction_window(sp.bbox(label), params.window_scale, w, h);

    // Degenerate window: not even one patch fits. Fill from the latent
    // reference directly.
    let recon = if win.w < ps || win.h < ps {
        latent_ref.crop(win.x0, win.y0, win.w, win.h)
    } else {
        let target = latent_ref.crop(win.x0, win.y0, win.w, win.h);
        let source = warped.crop(win.x0, win.y0, win.w, win.h);
        let local = PatchParams {
            seed: params
                .seed
                .wrapping_add((label as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            ..params.clone()
        };
        let nnf = nnf_search(&target, &source, &local)?;
        vote_reconstruct(&source, &nnf, win.w, win.h, ps)
    };

    let mut out = warped.clone();
    let ch = out.channels();
    let in_label =
        |x: usize, y: usize| win.contains(x, y) && sp.label_at(x, y) as usize == label;

    for wy in 0..win.h {
        for wx in 0..win.w {
            let (x, y) = (win.x0 + wx, win.y0 + wy);
            let this = sp.label_at(x, y) as usize == label;
            let alpha = if !params.feather {
                if this {
                    1.0
                } else {
                    0.0
                }
            } else {
                // 2 px linear band across the boundary: the inner ring
                // blends at 0.75, the outer ring at 0.25.
                let ring = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)]
                    .into_iter()
                    .any(|(nx, ny)| {
                        nx < w && ny < h && in_label(nx, ny) != this
                    });
                match (this, ring) {
                    (true, false) => 1.0,
                    (true, true) => 0.75,
                    (false, true) => 0.25,
                    (false, false) => 0.0,
                }
            };
            if alpha == 0.0 {
                continue;
            }
            for c in 0..ch {
                let r = recon.at(wx, wy, c);
                let v = if alpha == 1.0 {
                    r
                } else {
                    alpha * r + (1.0 - alpha) * warped.at(x, y, c)
                };
                out.set(x, y, c, v);
            }
        }
    }
    Ok(out)
}
