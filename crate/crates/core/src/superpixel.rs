//! SLIC superpixel segmentation of the reference image.
//!
//! Clustering runs in CIELAB+xy space: grid-seeded k-means with distance
//! `sqrt(d_lab^2 + (m/S)^2 * d_xy^2)`, a 2S x 2S search window per cluster
//! and a fixed 10 iterations, followed by a connectivity pass that merges
//! orphan components smaller than S^2/4 into their largest neighbor. The
//! label mask is computed once on the reference and reused for every
//! aligned input.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{ImageF, Rect};

const SLIC_ITERATIONS: usize = 10;

/// Per-pixel label raster partitioning an image into connected regions.
#[derive(Debug, Clone)]
pub struct SuperpixelMap {
    labels: Vec<u32>,
    width: usize,
    height: usize,
    count: usize,
    bboxes: Vec<Rect>,
    sizes: Vec<usize>,
}

impl SuperpixelMap {
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of labels L; labels are 0..L-1, all non-empty.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn bbox(&self, label: usize) -> Rect {
        self.bboxes[label]
    }

    pub fn size(&self, label: usize) -> usize {
        self.sizes[label]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
}

/// Segment into ~`n_superpixels` compact regions. `compactness` trades
/// color adherence against spatial regularity (10 is the usual default).
pub fn slic_segment(img: &ImageF, n_superpixels: usize, compactness: f32) -> Result<SuperpixelMap> {
    let (w, h) = (img.width(), img.height());
    let pixels = w * h;
    if n_superpixels == 0 {
        return Err(Error::InvalidArgument("n_superpixels must be >= 1".into()));
    }
    if n_superpixels > pixels {
        return Err(Error::InvalidArgument(format!(
            "n_superpixels {} exceeds pixel count {}",
            n_superpixels, pixels
        )));
    }
    if compactness <= 0.0 {
        return Err(Error::InvalidArgument("compactness must be > 0".into()));
    }

    let lab = to_lab_planes(img);
    let grid_step = (pixels as f32 / n_superpixels as f32).sqrt();

    // Seed grid: the (nx, ny) split whose product is closest to the request.
    let (nx, ny) = seed_grid(w, h, grid_step, n_superpixels);
    let k = nx * ny;
    let mut centers: Vec<[f32; 5]> = Vec::with_capacity(k); // L, a, b, x, y
    for j in 0..ny {
        for i in 0..nx {
            let cx = (i as f32 + 0.5) * w as f32 / nx as f32;
            let cy = (j as f32 + 0.5) * h as f32 / ny as f32;
            let px = (cx as usize).min(w - 1);
            let py = (cy as usize).min(h - 1);
            let li = py * w + px;
            centers.push([lab[0][li], lab[1][li], lab[2][li], cx, cy]);
        }
    }

    let spatial_norm = (compactness / grid_step) * (compactness / grid_step);
    let mut labels = vec![0u32; pixels];

    for _ in 0..SLIC_ITERATIONS {
        assign_pixels(&lab, w, h, &centers, grid_step, spatial_norm, &mut labels);
        update_centers(&lab, w, h, &labels, &mut centers);
    }

    let (labels, count) = enforce_connectivity(&labels, w, h, grid_step);

    let mut sizes = vec![0usize; count];
    let mut mins = vec![(usize::MAX, usize::MAX); count];
    let mut maxs = vec![(0usize, 0usize); count];
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x] as usize;
            sizes[l] += 1;
            mins[l].0 = mins[l].0.min(x);
            mins[l].1 = mins[l].1.min(y);
            maxs[l].0 = maxs[l].0.max(x);
            maxs[l].1 = maxs[l].1.max(y);
        }
    }
    let bboxes = (0..count)
        .map(|l| Rect::new(mins[l].0, mins[l].1, maxs[l].0 - mins[l].0 + 1, maxs[l].1 - mins[l].1 + 1))
        .collect();

    Ok(SuperpixelMap {
        labels,
        width: w,
        height: h,
        count,
        bboxes,
        sizes,
    })
}

fn seed_grid(w: usize, h: usize, step: f32, n: usize) -> (usize, usize) {
    let cand = |d: usize| -> [usize; 2] {
        let f = d as f32 / step;
        [(f.floor() as usize).max(1), (f.ceil() as usize).max(1)]
    };
    let mut best = (1usize, 1usize);
    let mut best_err = usize::MAX;
    for &nx in &cand(w) {
        for &ny in &cand(h) {
            let err = (nx * ny).abs_diff(n);
            // Prefer closer products; on ties prefer not undershooting.
            let better = err < best_err || (err == best_err && nx * ny > best.0 * best.1);
            if better {
                best = (nx, ny);
                best_err = err;
            }
        }
    }
    best
}

fn to_lab_planes(img: &ImageF) -> [Vec<f32>; 3] {
    let (w, h) = (img.width(), img.height());
    let mut planes = [vec![0.0f32; w * h], vec![0.0f32; w * h], vec![0.0f32; w * h]];
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = if img.channels() == 3 {
                (img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2))
            } else {
                let v = img.at(x, y, 0);
                (v, v, v)
            };
            let (l_, a_, b_) = srgb_to_lab(r, g, b);
            let i = y * w + x;
            planes[0][i] = l_;
            planes[1][i] = a_;
            planes[2][i] = b_;
        }
    }
    planes
}

/// sRGB (display-coded, [0,1]) to CIELAB under D65.
pub fn srgb_to_lab(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    #[inline]
    fn lin(c: f32) -> f32 {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    let (rl, gl, bl) = (lin(r), lin(g), lin(b));
    let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;

    #[inline]
    fn f(t: f32) -> f32 {
        const DELTA3: f32 = 0.008856452; // (6/29)^3
        if t > DELTA3 {
            t.cbrt()
        } else {
            t / (3.0 * 0.051293065) + 4.0 / 29.0 // 3*(6/29)^2
        }
    }
    let fx = f(x / 0.95047);
    let fy = f(y / 1.0);
    let fz = f(z / 1.08883);
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

#[allow(clippy::too_many_arguments)]
fn assign_pixels(
    lab: &[Vec<f32>; 3],
    w: usize,
    h: usize,
    centers: &[[f32; 5]],
    step: f32,
    spatial_norm: f32,
    labels: &mut [u32],
) {
    // Bucket clusters by step-sized cells; a pixel only competes with
    // clusters whose center is within one cell (window 2S x 2S).
    let gw = (w as f32 / step).ceil() as usize + 1;
    let gh = (h as f32 / step).ceil() as usize + 1;
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); gw * gh];
    for (ci, c) in centers.iter().enumerate() {
        let bx = ((c[3] / step) as usize).min(gw - 1);
        let by = ((c[4] / step) as usize).min(gh - 1);
        buckets[by * gw + bx].push(ci as u32);
    }

    let rows: Vec<Vec<u32>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row_labels = vec![u32::MAX; w];
            let by = ((y as f32 / step) as usize).min(gh - 1);
            for x in 0..w {
                let bx = ((x as f32 / step) as usize).min(gw - 1);
                let i = y * w + x;
                let (pl, pa, pb) = (lab[0][i], lab[1][i], lab[2][i]);
                let mut best = f32::MAX;
                let mut best_c = u32::MAX;
                for dby in by.saturating_sub(1)..=(by + 1).min(gh - 1) {
                    for dbx in bx.saturating_sub(1)..=(bx + 1).min(gw - 1) {
                        for &ci in &buckets[dby * gw + dbx] {
                            let c = &centers[ci as usize];
                            let dx = x as f32 - c[3];
                            let dy = y as f32 - c[4];
                            if dx.abs() > step || dy.abs() > step {
                                continue;
                            }
                            let dl = pl - c[0];
                            let da = pa - c[1];
                            let db = pb - c[2];
                            let d = dl * dl + da * da + db * db
                                + spatial_norm * (dx * dx + dy * dy);
                            if d < best || (d == best && ci < best_c) {
                                best = d;
                                best_c = ci;
                            }
                        }
                    }
                }
                row_labels[x] = best_c;
            }
            row_labels
        })
        .collect();

    for (y, rl) in rows.into_iter().enumerate() {
        labels[y * w..(y + 1) * w].copy_from_slice(&rl);
    }

    // Pixels left orphaned by center drift fall back to a full scan.
    for i in 0..w * h {
        if labels[i] == u32::MAX {
            let (x, y) = (i % w, i / w);
            let (pl, pa, pb) = (lab[0][i], lab[1][i], lab[2][i]);
            let mut best = f32::MAX;
            let mut best_c = 0u32;
            for (ci, c) in centers.iter().enumerate() {
                let dx = x as f32 - c[3];
                let dy = y as f32 - c[4];
                let dl = pl - c[0];
                let da = pa - c[1];
                let db = pb - c[2];
                let d = dl * dl + da * da + db * db + spatial_norm * (dx * dx + dy * dy);
                if d < best {
                    best = d;
                    best_c = ci as u32;
                }
            }
            labels[i] = best_c;
        }
    }
}

fn update_centers(lab: &[Vec<f32>; 3], w: usize, h: usize, labels: &[u32], centers: &mut [[f32; 5]]) {
    let k = centers.len();
    let mut acc = vec![[0.0f64; 6]; k]; // L, a, b, x, y, count
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let a = &mut acc[labels[i] as usize];
            a[0] += lab[0][i] as f64;
            a[1] += lab[1][i] as f64;
            a[2] += lab[2][i] as f64;
            a[3] += x as f64;
            a[4] += y as f64;
            a[5] += 1.0;
        }
    }
    for (c, a) in centers.iter_mut().zip(&acc) {
        if a[5] > 0.0 {
            for d in 0..5 {
                c[d] = (a[d] / a[5]) as f32;
            }
        }
    }
}

/// Relabel into 4-connected components and merge components smaller than
/// `step^2 / 4` into their largest adjacent component.
fn enforce_connectivity(labels: &[u32], w: usize, h: usize, step: f32) -> (Vec<u32>, usize) {
    let min_size = ((step * step / 4.0) as usize).max(1);
    let pixels = w * h;

    // Connected-component labeling in raster first-appearance order.
    let mut comp = vec![u32::MAX; pixels];
    let mut comp_sizes: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..pixels {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = comp_sizes.len() as u32;
        let slic = labels[start];
        let mut size = 0usize;
        stack.push(start);
        comp[start] = id;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut try_push = |j: usize| {
                if comp[j] == u32::MAX && labels[j] == slic {
                    comp[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                try_push(i - 1);
            }
            if x + 1 < w {
                try_push(i + 1);
            }
            if y > 0 {
                try_push(i - w);
            }
            if y + 1 < h {
                try_push(i + w);
            }
        }
        comp_sizes.push(size);
    }

    let ncomp = comp_sizes.len();

    // Component adjacency from 4-neighbor pixel edges.
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); ncomp];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let a = comp[i];
            if x + 1 < w && comp[i + 1] != a {
                adjacency[a as usize].push(comp[i + 1]);
                adjacency[comp[i + 1] as usize].push(a);
            }
            if y + 1 < h && comp[i + w] != a {
                adjacency[a as usize].push(comp[i + w]);
                adjacency[comp[i + w] as usize].push(a);
            }
        }
    }
    for adj in &mut adjacency {
        adj.sort_unstable();
        adj.dedup();
    }

    // Union-find; merge undersized roots into their largest adjacent root.
    let mut parent: Vec<u32> = (0..ncomp as u32).collect();
    fn find(parent: &mut [u32], mut i: u32) -> u32 {
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }
    let mut sizes = comp_sizes.clone();
    loop {
        let mut merged_any = false;
        for c in 0..ncomp as u32 {
            let root = find(&mut parent, c);
            if sizes[root as usize] >= min_size {
                continue;
            }
            // Largest adjacent root; ties resolved toward the smaller id.
            let mut target: Option<u32> = None;
            for member in 0..ncomp as u32 {
                if find(&mut parent, member) != root {
                    continue;
                }
                for &n in &adjacency[member as usize] {
                    let nr = find(&mut parent, n);
                    if nr == root {
                        continue;
                    }
                    let better = match target {
                        None => true,
                        Some(t) => {
                            sizes[nr as usize] > sizes[t as usize]
                                || (sizes[nr as usize] == sizes[t as usize] && nr < t)
                        }
                    };
                    if better {
                        target = Some(nr);
                    }
                }
            }
            if let Some(t) = target {
                parent[root as usize] = t;
                sizes[t as usize] += sizes[root as usize];
                merged_any = true;
            }
        }
        if !merged_any {
            break;
        }
    }

    // Compact final labels in raster first-appearance order.
    let mut remap = vec![u32::MAX; ncomp];
    let mut out = vec![0u32; pixels];
    let mut next = 0u32;
    for i in 0..pixels {
        let root = find(&mut parent, comp[i]);
        if remap[root as usize] == u32::MAX {
            remap[root as usize] = next;
            next += 1;
        }
        out[i] = remap[root as usize];
    }
    (out, next as usize)
}

/// Render label boundaries onto a copy of the image (diagnostic overlay).
pub fn boundary_overlay(img: &ImageF, sp: &SuperpixelMap) -> ImageF {
    let (w, h) = (img.width(), img.height());
    let mut out = if img.channels() == 3 {
        img.clone()
    } else {
        ImageF::from_fn(w, h, 3, |x, y, _| img.at(x, y, 0))
    };
    for y in 0..h {
        for x in 0..w {
            let l = sp.label_at(x, y);
            let boundary = (x + 1 < w && sp.label_at(x + 1, y) != l)
                || (y + 1 < h && sp.label_at(x, y + 1) != l);
            if boundary {
                out.set(x, y, 0, 1.0);
                out.set(x, y, 1, 0.0);
                out.set(x, y, 2, 0.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flood_fill_size(sp: &SuperpixelMap, sx: usize, sy: usize) -> usize {
        let (w, h) = (sp.width(), sp.height());
        let target = sp.label_at(sx, sy);
        let mut seen = vec![false; w * h];
        let mut stack = vec![(sx, sy)];
        seen[sy * w + sx] = true;
        let mut n = 0;
        while let Some((x, y)) = stack.pop() {
            n += 1;
            let mut push = |nx: usize, ny: usize, seen: &mut Vec<bool>, stack: &mut Vec<(usize, usize)>| {
                if !seen[ny * w + nx] && sp.label_at(nx, ny) == target {
                    seen[ny * w + nx] = true;
                    stack.push((nx, ny));
                }
            };
            if x > 0 {
                push(x - 1, y, &mut seen, &mut stack);
            }
            if x + 1 < w {
                push(x + 1, y, &mut seen, &mut stack);
            }
            if y > 0 {
                push(x, y - 1, &mut seen, &mut stack);
            }
            if y + 1 < h {
                push(x, y + 1, &mut seen, &mut stack);
            }
        }
        n
    }

    fn assert_partition_and_connectivity(sp: &SuperpixelMap) {
        // Sizes must sum to the pixel count and every label be non-empty.
        assert_eq!(sp.sizes().iter().sum::<usize>(), sp.width() * sp.height());
        assert!(sp.sizes().iter().all(|&s| s > 0));
        assert!(sp.labels().iter().all(|&l| (l as usize) < sp.count()));
        // Connectivity: a flood fill from the first pixel of each label
        // must reach the label's full size.
        let mut first_pixel = vec![None; sp.count()];
        for y in 0..sp.height() {
            for x in 0..sp.width() {
                let l = sp.label_at(x, y) as usize;
                if first_pixel[l].is_none() {
                    first_pixel[l] = Some((x, y));
                }
            }
        }
        for l in 0..sp.count() {
            let (x, y) = first_pixel[l].unwrap();
            assert_eq!(flood_fill_size(sp, x, y), sp.size(l), "label {l} disconnected");
        }
    }

    #[test]
    fn constant_image_splits_into_grid() {
        let img = ImageF::from_data(40, 40, 3, vec![0.5; 40 * 40 * 3]).unwrap();
        let sp = slic_segment(&img, 4, 10.0).unwrap();
        assert_eq!(sp.count(), 4);
        assert_partition_and_connectivity(&sp);
        for l in 0..4 {
            let s = sp.size(l) as f32;
            assert!((400.0 / 2.0..=2.0 * 400.0).contains(&s), "size {s}");
        }
    }

    #[test]
    fn single_superpixel_covers_everything() {
        let img = ImageF::from_data(17, 11, 1, vec![0.3; 17 * 11]).unwrap();
        let sp = slic_segment(&img, 1, 10.0).unwrap();
        assert_eq!(sp.count(), 1);
        assert_eq!(sp.size(0), 17 * 11);
        assert_eq!(sp.bbox(0), Rect::new(0, 0, 17, 11));
    }

    #[test]
    fn degenerate_requests_rejected() {
        let img = ImageF::new(4, 4, 1);
        assert!(slic_segment(&img, 0, 10.0).is_err());
        assert!(slic_segment(&img, 17, 10.0).is_err());
        assert!(slic_segment(&img, 4, -1.0).is_err());
    }

    /// Brute-force Lloyd 2-means in (lab, xy) space with grid init; the
    /// tone boundary it finds is the oracle for the SLIC one.
    fn two_means_boundary(img: &ImageF, m: f32) -> f32 {
        let (w, h) = (img.width(), img.height());
        let step = ((w * h) as f32 / 2.0).sqrt();
        let sn = (m / step) * (m / step);
        let lab: Vec<(f32, f32, f32)> = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let v = img.at(x, y, 0);
                srgb_to_lab(v, v, v)
            })
            .collect();
        let mut centers = [[0.0f32; 5]; 2];
        for (i, cxf) in [(0usize, 0.25f32), (1, 0.75)] {
            let px = ((cxf * w as f32) as usize).min(w - 1);
            let py = h / 2;
            let l = lab[py * w + px];
            centers[i] = [l.0, l.1, l.2, cxf * w as f32, py as f32];
        }
        let mut assign = vec![0usize; w * h];
        for _ in 0..50 {
            for i in 0..w * h {
                let (x, y) = (i % w, i / w);
                let d = |c: &[f32; 5]| {
                    let dl = lab[i].0 - c[0];
                    let da = lab[i].1 - c[1];
                    let db = lab[i].2 - c[2];
                    let dx = x as f32 - c[3];
                    let dy = y as f32 - c[4];
                    dl * dl + da * da + db * db + sn * (dx * dx + dy * dy)
                };
                assign[i] = if d(&centers[0]) <= d(&centers[1]) { 0 } else { 1 };
            }
            for c in 0..2 {
                let mut acc = [0.0f64; 6];
                for i in 0..w * h {
                    if assign[i] == c {
                        let (x, y) = (i % w, i / w);
                        acc[0] += lab[i].0 as f64;
                        acc[1] += lab[i].1 as f64;
                        acc[2] += lab[i].2 as f64;
                        acc[3] += x as f64;
                        acc[4] += y as f64;
                        acc[5] += 1.0;
                    }
                }
                if acc[5] > 0.0 {
                    for d in 0..5 {
                        centers[c][d] = (acc[d] / acc[5]) as f32;
                    }
                }
            }
        }
        // Mean boundary column: first x per row where assignment flips.
        let mut cols = Vec::new();
        for y in 0..h {
            for x in 1..w {
                if assign[y * w + x] != assign[y * w + x - 1] {
                    cols.push(x as f32);
                    break;
                }
            }
        }
        cols.iter().sum::<f32>() / cols.len() as f32
    }

    #[test]
    fn two_tone_split_matches_two_means_oracle() {
        // Left half dark, right half bright, low compactness.
        let (w, h) = (24, 12);
        let img = ImageF::from_fn(w, h, 1, |x, _, _| if x < w / 2 { 0.2 } else { 0.8 });
        let m = 1.0;
        let sp = slic_segment(&img, 2, m).unwrap();
        assert_eq!(sp.count(), 2);
        assert_partition_and_connectivity(&sp);
        let mut cols = Vec::new();
        for y in 0..h {
            for x in 1..w {
                if sp.label_at(x, y) != sp.label_at(x - 1, y) {
                    cols.push(x as f32);
                    break;
                }
            }
        }
        let slic_boundary = cols.iter().sum::<f32>() / cols.len() as f32;
        let oracle_boundary = two_means_boundary(&img, m);
        assert!(
            (slic_boundary - oracle_boundary).abs() <= 2.0,
            "slic boundary {slic_boundary} vs oracle {oracle_boundary}"
        );
        // Both must sit at the tone edge.
        assert!((slic_boundary - w as f32 / 2.0).abs() <= 2.0);
    }

    #[test]
    fn textured_segmentation_is_deterministic_and_valid() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let img = ImageF::from_fn(61, 47, 3, |_, _, _| rng.random::<f32>());
        let a = slic_segment(&img, 24, 10.0).unwrap();
        let b = slic_segment(&img, 24, 10.0).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_partition_and_connectivity(&a);
        // Label count stays within +-20% of the request for a sane image.
        assert!(a.count() >= 19 && a.count() <= 29, "count {}", a.count());
    }
}
