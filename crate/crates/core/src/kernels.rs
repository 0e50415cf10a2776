//! Low-level raster operations shared by the pyramid and flow code:
//! 5-tap binomial filtering with symmetric borders, ceil-halving
//! reduce/expand, and bilinear sampling.

use crate::image::ImageF;

/// Binomial kernel [1, 4, 6, 4, 1] / 16.
const K5: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Symmetric (reflect-without-repeat) index for out-of-range taps.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let mut i = i;
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable 5-tap binomial blur, symmetric borders.
pub(crate) fn blur5(img: &ImageF) -> ImageF {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let src = img.data();
    let mut tmp = vec![0.0f32; src.len()];
    // horizontal
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (m, k) in K5.iter().enumerate() {
                    let xi = reflect(x as isize + m as isize - 2, w);
                    acc += k * src[(y * w + xi) * ch + c];
                }
                tmp[(y * w + x) * ch + c] = acc;
            }
        }
    }
    // vertical
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (m, k) in K5.iter().enumerate() {
                    let yi = reflect(y as isize + m as isize - 2, h);
                    acc += k * tmp[(yi * w + x) * ch + c];
                }
                out[(y * w + x) * ch + c] = acc;
            }
        }
    }
    ImageF::from_data(w, h, ch, out).expect("same dims")
}

/// Ceil-halved dimension.
#[inline]
pub(crate) fn half_dim(n: usize) -> usize {
    n.div_ceil(2)
}

/// Blur + decimate by 2 (even samples), ceil-halving so odd sizes survive.
pub(crate) fn reduce_half(img: &ImageF) -> ImageF {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let (nw, nh) = (half_dim(w), half_dim(h));
    let src = img.data();
    // horizontal: convolve at even columns
    let mut tmp = vec![0.0f32; nw * h * ch];
    for y in 0..h {
        for x in 0..nw {
            for c in 0..ch {
                let mut acc = 0.0;
                for (m, k) in K5.iter().enumerate() {
                    let xi = reflect(2 * x as isize + m as isize - 2, w);
                    acc += k * src[(y * w + xi) * ch + c];
                }
                tmp[(y * nw + x) * ch + c] = acc;
            }
        }
    }
    // vertical: convolve at even rows
    let mut out = vec![0.0f32; nw * nh * ch];
    for y in 0..nh {
        for x in 0..nw {
            for c in 0..ch {
                let mut acc = 0.0;
                for (m, k) in K5.iter().enumerate() {
                    let yi = reflect(2 * y as isize + m as isize - 2, h);
                    acc += k * tmp[(yi * nw + x) * ch + c];
                }
                out[(y * nw + x) * ch + c] = acc;
            }
        }
    }
    ImageF::from_data(nw, nh, ch, out).expect("sized above")
}

/// Zero-stuff and blur (gain 2) up to an explicit target size; inverse of
/// [`reduce_half`] in the Burt-Adelson sense. `img` must have ceil-half of
/// the target dimensions.
pub(crate) fn expand_to(img: &ImageF, tw: usize, th: usize) -> ImageF {
    let (sw, sh, ch) = (img.width(), img.height(), img.channels());
    assert_eq!(sw, half_dim(tw), "expand width mismatch");
    assert_eq!(sh, half_dim(th), "expand height mismatch");
    let src = img.data();

    // horizontal: out(x) = 2 * sum_m k(m) z(x+m), z zero-stuffed at odd taps
    let mut tmp = vec![0.0f32; tw * sh * ch];
    for y in 0..sh {
        for x in 0..tw {
            for c in 0..ch {
                let mut acc = 0.0;
                for (m, k) in K5.iter().enumerate() {
                    let zi = reflect(x as isize + m as isize - 2, tw);
                    if zi % 2 == 0 {
                        acc += k * src[(y * sw + zi / 2) * ch + c];
                    }
                }
                tmp[(y * tw + x) * ch + c] = 2.0 * acc;
            }
        }
    }
    let mut out = vec![0.0f32; tw * th * ch];
    for y in 0..th {
        for x in 0..tw {
            for c in 0..ch {
                let mut acc = 0.0;
                for (m, k) in K5.iter().enumerate() {
                    let zi = reflect(y as isize + m as isize - 2, th);
                    if zi % 2 == 0 {
                        acc += k * tmp[(zi / 2 * tw + x) * ch + c];
                    }
                }
                out[(y * tw + x) * ch + c] = 2.0 * acc;
            }
        }
    }
    ImageF::from_data(tw, th, ch, out).expect("sized above")
}

/// Bilinear sample with coordinates clamped to the border. Integer
/// coordinates return the pixel bit-exactly.
#[inline]
pub(crate) fn bilinear_clamped(img: &ImageF, x: f32, y: f32, c: usize) -> f32 {
    let w = img.width();
    let h = img.height();
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    if fx == 0.0 && fy == 0.0 {
        return img.at(x0, y0, c);
    }
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let v00 = img.at(x0, y0, c);
    let v10 = img.at(x1, y0, c);
    let v01 = img.at(x0, y1, c);
    let v11 = img.at(x1, y1, c);
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
}

/// Bilinear plane resize with pixel-center alignment (for flow upscaling).
pub(crate) fn resize_plane_bilinear(
    src: &[f32],
    sw: usize,
    sh: usize,
    tw: usize,
    th: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), sw * sh);
    let mut out = vec![0.0f32; tw * th];
    let sx_ratio = sw as f32 / tw as f32;
    let sy_ratio = sh as f32 / th as f32;
    for y in 0..th {
        let sy = ((y as f32 + 0.5) * sy_ratio - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = sy.floor() as usize;
        let fy = sy - y0 as f32;
        let y1 = (y0 + 1).min(sh - 1);
        for x in 0..tw {
            let sx = ((x as f32 + 0.5) * sx_ratio - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = sx.floor() as usize;
            let fx = sx - x0 as f32;
            let x1 = (x0 + 1).min(sw - 1);
            let v = (1.0 - fy) * ((1.0 - fx) * src[y0 * sw + x0] + fx * src[y0 * sw + x1])
                + fy * ((1.0 - fx) * src[y1 * sw + x0] + fx * src[y1 * sw + x1]);
            out[y * tw + x] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(0, 1), 0);
        assert_eq!(reflect(-2, 2), 0);
        assert_eq!(reflect(3, 2), 1);
    }

    #[test]
    fn blur_preserves_constant() {
        let img = ImageF::from_data(7, 5, 1, vec![0.42; 35]).unwrap();
        let b = blur5(&img);
        for v in b.data() {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn reduce_expand_preserve_constant_and_dims() {
        let img = ImageF::from_data(9, 7, 1, vec![0.3; 63]).unwrap();
        let r = reduce_half(&img);
        assert_eq!((r.width(), r.height()), (5, 4));
        for v in r.data() {
            assert!((v - 0.3).abs() < 1e-6);
        }
        let e = expand_to(&r, 9, 7);
        assert_eq!((e.width(), e.height()), (9, 7));
        for v in e.data() {
            assert!((v - 0.3).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn bilinear_integer_coords_exact() {
        let img = ImageF::from_data(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(bilinear_clamped(&img, 1.0, 1.0, 0), 0.4);
        assert!((bilinear_clamped(&img, 0.5, 0.0, 0) - 0.15).abs() < 1e-7);
        // clamped outside
        assert_eq!(bilinear_clamped(&img, -3.0, 0.0, 0), 0.1);
        assert_eq!(bilinear_clamped(&img, 5.0, 5.0, 0), 0.4);
    }
}
