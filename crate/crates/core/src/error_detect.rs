//! Misregistration detection from per-superpixel flow statistics.
//!
//! A superpixel is flagged when the population standard deviation of
//! either flow component exceeds a threshold. The threshold is asymmetric:
//! under-exposed inputs (index below the reference) use the stricter
//! `t_flow_u` so that IMF noise in bright regions does not trigger
//! needless PatchMatch work; over-exposed inputs use `t_flow_o`.

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::image::ImageF;
use crate::superpixel::SuperpixelMap;

/// Flow-variance thresholds in pixels.
#[derive(Debug, Clone, Copy)]
pub struct Thresholds {
    /// Applied to inputs darker than the reference (default 3.5).
    pub t_flow_u: f32,
    /// Applied to inputs brighter than the reference (default 1.5).
    pub t_flow_o: f32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            t_flow_u: 3.5,
            t_flow_o: 1.5,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if self.t_flow_u > 0.0 && self.t_flow_o > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "flow thresholds must be positive".into(),
            ))
        }
    }
}

/// Per-superpixel flow statistics: population standard deviation and mean
/// of each component, plus the pixel count.
#[derive(Debug, Clone)]
pub struct FlowStats {
    pub var_x: Vec<f32>,
    pub var_y: Vec<f32>,
    pub avg_x: Vec<f32>,
    pub avg_y: Vec<f32>,
    pub n: Vec<usize>,
}

/// Per-superpixel error flags.
#[derive(Debug, Clone)]
pub struct ErrorMask {
    flags: Vec<bool>,
    thresholds_used: (f32, f32),
}

impl ErrorMask {
    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    #[inline]
    pub fn is_flagged(&self, label: usize) -> bool {
        self.flags[label]
    }

    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    /// The (t_flow_u, t_flow_o) pair in effect when the mask was built.
    pub fn thresholds_used(&self) -> (f32, f32) {
        self.thresholds_used
    }

    /// Labels with the flag set, ascending.
    pub fn flagged_labels(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(l, &f)| f.then_some(l))
            .collect()
    }
}

/// Per-label standard deviation of the flow components:
/// `var_x = sqrt(sum (u - avg_x)^2 / N)`, and likewise for `var_y`.
pub fn flow_variance(flow: &FlowField, sp: &SuperpixelMap) -> Result<FlowStats> {
    if flow.width() != sp.width() || flow.height() != sp.height() {
        return Err(Error::DimensionMismatch(format!(
            "flow {}x{} vs superpixel map {}x{}",
            flow.width(),
            flow.height(),
            sp.width(),
            sp.height()
        )));
    }
    let l = sp.count();
    let mut sum_x = vec![0.0f64; l];
    let mut sum_y = vec![0.0f64; l];
    let mut sum_x2 = vec![0.0f64; l];
    let mut sum_y2 = vec![0.0f64; l];
    let u = flow.u();
    let v = flow.v();
    for (i, &lab) in sp.labels().iter().enumerate() {
        let lab = lab as usize;
        sum_x[lab] += u[i] as f64;
        sum_y[lab] += v[i] as f64;
        sum_x2[lab] += (u[i] as f64) * (u[i] as f64);
        sum_y2[lab] += (v[i] as f64) * (v[i] as f64);
    }
    let mut stats = FlowStats {
        var_x: Vec::with_capacity(l),
        var_y: Vec::with_capacity(l),
        avg_x: Vec::with_capacity(l),
        avg_y: Vec::with_capacity(l),
        n: sp.sizes().to_vec(),
    };
    for lab in 0..l {
        let n = sp.sizes()[lab] as f64;
        let ax = sum_x[lab] / n;
        let ay = sum_y[lab] / n;
        stats.avg_x.push(ax as f32);
        stats.avg_y.push(ay as f32);
        stats.var_x.push((sum_x2[lab] / n - ax * ax).max(0.0).sqrt() as f32);
        stats.var_y.push((sum_y2[lab] / n - ay * ay).max(0.0).sqrt() as f32);
    }
    Ok(stats)
}

/// Flag labels whose flow deviation exceeds the exposure-dependent
/// threshold: strictly greater, with `t_flow_u` for `input < ref` and
/// `t_flow_o` for `input > ref`. The reference itself is never tested.
pub fn detect_errors(
    stats: &FlowStats,
    input_index: usize,
    ref_index: usize,
    th: &Thresholds,
) -> Result<ErrorMask> {
    th.validate()?;
    if input_index == ref_index {
        return Err(Error::InvalidArgument(
            "the reference image is never tested for alignment errors".into(),
        ));
    }
    let t = if input_index < ref_index {
        th.t_flow_u
    } else {
        th.t_flow_o
    };
    let flags = stats
        .var_x
        .iter()
        .zip(&stats.var_y)
        .map(|(&vx, &vy)| vx.max(vy) > t)
        .collect();
    Ok(ErrorMask {
        flags,
        thresholds_used: (th.t_flow_u, th.t_flow_o),
    })
}

/// Render the mask as a white-on-black image over the superpixel grid.
pub fn mask_to_image(mask: &ErrorMask, sp: &SuperpixelMap) -> ImageF {
    ImageF::from_fn(sp.width(), sp.height(), 1, |x, y, _| {
        if mask.is_flagged(sp.label_at(x, y) as usize) {
            1.0
        } else {
            0.0
        }
    })
}
