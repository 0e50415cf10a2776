//! Objective fusion quality: the Piella Q_S index built on the universal
//! image quality index Q_0, evaluated on 8x8 sliding windows (stride 1)
//! over luma.
//!
//! For stacks of more than two inputs the score is the mean of Q_S over
//! consecutive exposure pairs; the report carries the pair count so the
//! aggregation is explicit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageF;

pub const WINDOW_SIZE: usize = 8;
pub const WINDOW_STRIDE: usize = 1;

/// Q_S evaluation of one input pair against a fused image.
#[derive(Debug, Clone)]
pub struct QualityReport {
    pub q_s: f64,
    /// Per-window saliency weight of the first input, row-major.
    pub lambdas: Vec<f64>,
    pub window_size: usize,
    pub window_stride: usize,
    pub windows: usize,
}

/// Aggregate score for a K-image stack: mean Q_S over consecutive pairs.
#[derive(Debug, Clone, Copy)]
pub struct StackScore {
    pub q_s: f64,
    pub windows: usize,
    pub pairs: usize,
}

#[derive(Clone, Copy)]
struct WindowMoments {
    mean: f64,
    var: f64,
}

/// One-pass window sums in f64 over a luma plane.
fn moments(plane: &[f64], w: usize, x0: usize, y0: usize, n: usize) -> WindowMoments {
    let mut s = 0.0;
    let mut s2 = 0.0;
    for y in y0..y0 + n {
        for x in x0..x0 + n {
            let v = plane[y * w + x];
            s += v;
            s2 += v * v;
        }
    }
    let count = (n * n) as f64;
    let mean = s / count;
    WindowMoments {
        mean,
        var: s2 / count - mean * mean,
    }
}

fn covariance(a: &[f64], b: &[f64], w: usize, x0: usize, y0: usize, n: usize, ma: f64, mb: f64) -> f64 {
    let mut s = 0.0;
    for y in y0..y0 + n {
        for x in x0..x0 + n {
            s += a[y * w + x] * b[y * w + x];
        }
    }
    s / (n * n) as f64 - ma * mb
}

/// Q_0 from precomputed moments, with the standard degenerate-case
/// stabilization: when both variances vanish the index reduces to the
/// luminance term, and to 1 when the means also vanish.
fn q0_from_moments(a: WindowMoments, b: WindowMoments, cov: f64) -> f64 {
    let var_sum = a.var + b.var;
    let mean_sq = a.mean * a.mean + b.mean * b.mean;
    if var_sum == 0.0 {
        if mean_sq == 0.0 {
            return 1.0;
        }
        return 2.0 * a.mean * b.mean / mean_sq;
    }
    if mean_sq == 0.0 {
        // zero-mean signals: only the structural term survives
        return if var_sum == 0.0 { 1.0 } else { 4.0 * cov * a.mean * b.mean / (var_sum * mean_sq).max(f64::MIN_POSITIVE) };
    }
    4.0 * cov * a.mean * b.mean / (var_sum * mean_sq)
}

fn luma_plane(img: &ImageF) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(img.luma(x, y) as f64);
        }
    }
    out
}

/// Universal image quality index of two same-sized images treated as a
/// single window.
pub fn uiqi_window(a: &ImageF, b: &ImageF) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(
            "uiqi windows differ in size".into(),
        ));
    }
    let pa = luma_plane(a);
    let pb = luma_plane(b);
    let n = pa.len() as f64;
    let (ma, mb) = (
        pa.iter().sum::<f64>() / n,
        pb.iter().sum::<f64>() / n,
    );
    let va = pa.iter().map(|v| v * v).sum::<f64>() / n - ma * ma;
    let vb = pb.iter().map(|v| v * v).sum::<f64>() / n - mb * mb;
    let cov = pa.iter().zip(&pb).map(|(x, y)| x * y).sum::<f64>() / n - ma * mb;
    Ok(q0_from_moments(
        WindowMoments { mean: ma, var: va },
        WindowMoments { mean: mb, var: vb },
        cov,
    ))
}

/// Piella Q_S of a fused image given two inputs:
/// `mean_w [ lambda(w) Q_0(a,f|w) + (1 - lambda(w)) Q_0(b,f|w) ]`,
/// `lambda = s(a|w) / (s(a|w) + s(b|w))` with local variance as saliency
/// (0.5 where both vanish).
pub fn q_s(a: &ImageF, b: &ImageF, fused: &ImageF) -> Result<QualityReport> {
    for img in [b, fused] {
        if img.width() != a.width() || img.height() != a.height() {
            return Err(Error::DimensionMismatch(
                "q_s inputs differ in size".into(),
            ));
        }
    }
    let (w, h) = (a.width(), a.height());
    let n = WINDOW_SIZE;
    if w < n || h < n {
        return Err(Error::InvalidArgument(format!(
            "images must be at least {n}x{n} for Q_S"
        )));
    }
    let pa = luma_plane(a);
    let pb = luma_plane(b);
    let pf = luma_plane(fused);

    let xs = (w - n) / WINDOW_STRIDE + 1;
    let ys = (h - n) / WINDOW_STRIDE + 1;

    // Window rows are independent; sum in fixed row order.
    let rows: Vec<(f64, Vec<f64>)> = (0..ys)
        .into_par_iter()
        .map(|wy| {
            let y0 = wy * WINDOW_STRIDE;
            let mut sum = 0.0f64;
            let mut lambdas = Vec::with_capacity(xs);
            for wx in 0..xs {
                let x0 = wx * WINDOW_STRIDE;
                let ma = moments(&pa, w, x0, y0, n);
                let mb = moments(&pb, w, x0, y0, n);
                let mf = moments(&pf, w, x0, y0, n);
                let caf = covariance(&pa, &pf, w, x0, y0, n, ma.mean, mf.mean);
                let cbf = covariance(&pb, &pf, w, x0, y0, n, mb.mean, mf.mean);
                let sal = ma.var + mb.var;
                let lambda = if sal == 0.0 { 0.5 } else { ma.var / sal };
                let q = lambda * q0_from_moments(ma, mf, caf)
                    + (1.0 - lambda) * q0_from_moments(mb, mf, cbf);
                lambdas.push(lambda);
                sum += q;
            }
            (sum, lambdas)
        })
        .collect();

    let mut total = 0.0f64;
    let mut lambdas = Vec::with_capacity(xs * ys);
    for (s, l) in rows {
        total += s;
        lambdas.extend(l);
    }
    let windows = xs * ys;
    Ok(QualityReport {
        q_s: total / windows as f64,
        lambdas,
        window_size: n,
        window_stride: WINDOW_STRIDE,
        windows,
    })
}

/// Score a fused image against a whole stack: the mean of [`q_s`] over
/// consecutive exposure pairs (S_k, S_{k+1}).
pub fn score_stack(stack: &[ImageF], fused: &ImageF) -> Result<StackScore> {
    if stack.len() < 2 {
        return Err(Error::InvalidArgument(
            "scoring needs at least two inputs".into(),
        ));
    }
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for pair in stack.windows(2) {
        let rep = q_s(&pair[0], &pair[1], fused)?;
        total += rep.q_s;
        windows = rep.windows;
    }
    let pairs = stack.len() - 1;
    Ok(StackScore {
        q_s: total / pairs as f64,
        windows,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageF {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageF::from_fn(w, h, 1, |_, _, _| rng.random::<f32>())
    }

    #[test]
    fn identical_nonconstant_windows_score_one() {
        let img = random_image(8, 8, 1);
        assert_eq!(uiqi_window(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn contrast_inversion_goes_negative() {
        // b = 1 - a on a ramp window: covariance is negative.
        let a = ImageF::from_fn(2, 2, 1, |x, y, _| 0.2 + 0.2 * (y * 2 + x) as f32);
        let b = ImageF::from_data(2, 2, 1, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let q = uiqi_window(&a, &b).unwrap();
        assert!(q < 0.0, "expected negative index, got {q}");
    }

    #[test]
    fn constant_windows_use_luminance_term() {
        let a = ImageF::from_data(4, 4, 1, vec![0.5; 16]).unwrap();
        let b = ImageF::from_data(4, 4, 1, vec![0.5; 16]).unwrap();
        assert_eq!(uiqi_window(&a, &b).unwrap(), 1.0);
        let c = ImageF::from_data(4, 4, 1, vec![0.25; 16]).unwrap();
        let expect = 2.0 * 0.5 * 0.25 / (0.25 + 0.0625);
        assert!((uiqi_window(&a, &c).unwrap() - expect).abs() < 1e-12);
        // both all-black
        let z = ImageF::from_data(4, 4, 1, vec![0.0; 16]).unwrap();
        assert_eq!(uiqi_window(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn self_fusion_scores_exactly_one() {
        let a = random_image(16, 16, 2);
        let rep = q_s(&a, &a, &a).unwrap();
        assert_eq!(rep.q_s, 1.0);
        assert_eq!(rep.windows, 81);
    }

    #[test]
    fn equal_saliency_gives_half_lambda() {
        let a = random_image(16, 16, 3);
        let f = random_image(16, 16, 4);
        let rep = q_s(&a, &a, &f).unwrap();
        assert!(rep.lambdas.iter().all(|&l| l == 0.5));
    }

    #[test]
    fn lambda_swaps_complementarily() {
        let a = random_image(16, 16, 5);
        let b = random_image(16, 16, 6);
        let f = random_image(16, 16, 7);
        let ab = q_s(&a, &b, &f).unwrap();
        let ba = q_s(&b, &a, &f).unwrap();
        assert!((ab.q_s - ba.q_s).abs() < 1e-12);
        for (x, y) in ab.lambdas.iter().zip(&ba.lambdas) {
            assert!((x + y - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn q0_bounded_by_one_in_magnitude() {
        for seed in 0..50u64 {
            let a = random_image(8, 8, 100 + seed);
            let b = random_image(8, 8, 200 + seed);
            let q = uiqi_window(&a, &b).unwrap();
            assert!(q.abs() <= 1.0 + 1e-12, "{q}");
        }
    }

    // ------------------------------------------------------------------
    // Straight-line oracle: textbook two-pass statistics, no shared code.
    // ------------------------------------------------------------------

    fn oracle_q0(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let va = a.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / n;
        let vb = b.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / n;
        let cov = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n;
        if va + vb == 0.0 {
            if ma * ma + mb * mb == 0.0 {
                return 1.0;
            }
            return 2.0 * ma * mb / (ma * ma + mb * mb);
        }
        4.0 * cov * ma * mb / ((va + vb) * (ma * ma + mb * mb))
    }

    fn oracle_qs(a: &ImageF, b: &ImageF, f: &ImageF) -> f64 {
        let (w, h) = (a.width(), a.height());
        let n = 8usize;
        let grab = |img: &ImageF, x0: usize, y0: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(n * n);
            for y in y0..y0 + n {
                for x in x0..x0 + n {
                    out.push(img.luma(x, y) as f64);
                }
            }
            out
        };
        let variance = |win: &[f64]| -> f64 {
            let m = win.iter().sum::<f64>() / win.len() as f64;
            win.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / win.len() as f64
        };
        let mut total = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let wa = grab(a, x0, y0);
                let wb = grab(b, x0, y0);
                let wf = grab(f, x0, y0);
                let (sa, sb) = (variance(&wa), variance(&wb));
                let lambda = if sa + sb == 0.0 { 0.5 } else { sa / (sa + sb) };
                total += lambda * oracle_q0(&wa, &wf) + (1.0 - lambda) * oracle_q0(&wb, &wf);
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn matches_straight_line_oracle() {
        for seed in 0..20u64 {
            let a = random_image(16, 16, 300 + seed);
            let b = random_image(16, 16, 400 + seed);
            let f = ImageF::from_data(
                16,
                16,
                1,
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| 0.5 * x + 0.5 * y)
                    .collect(),
            )
            .unwrap();
            let got = q_s(&a, &b, &f).unwrap().q_s;
            let want = oracle_qs(&a, &b, &f);
            assert!(
                (got - want).abs() < 1e-10,
                "seed {seed}: {got} vs oracle {want}"
            );
        }
    }

    #[test]
    fn stack_scoring_averages_consecutive_pairs() {
        let a = random_image(16, 16, 8);
        let b = random_image(16, 16, 9);
        let c = random_image(16, 16, 10);
        let f = random_image(16, 16, 11);
        let s = score_stack(&[a.clone(), b.clone(), c.clone()], &f).unwrap();
        let q1 = q_s(&a, &b, &f).unwrap().q_s;
        let q2 = q_s(&b, &c, &f).unwrap().q_s;
        assert!((s.q_s - 0.5 * (q1 + q2)).abs() < 1e-12);
        assert_eq!(s.pairs, 2);
        assert!(score_stack(&[a], &f).is_err());
    }
}
