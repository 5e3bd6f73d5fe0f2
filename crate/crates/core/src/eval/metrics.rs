//! Difference maps, Otsu background masks and masked fidelity metrics.

use image::RgbImage;

use super::EvalError;
use crate::ild::gaussian_kernel;
use crate::mask::BitMask;
use crate::par::{self, Exec};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_SIGMA: f64 = 1.5;
/// Half-width of the 11x11 SSIM window.
pub const SSIM_RADIUS: u32 = 5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Largest pixel count for which the integer Otsu search cannot overflow.
pub const OTSU_MAX_PIXELS: u64 = 1 << 28;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiffMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<u8>,
    pub histogram: [u64; 256],
}

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<(), EvalError> {
    if a.dimensions() != b.dimensions() {
        return Err(EvalError::DimensionMismatch {
            left: a.dimensions(),
            right: b.dimensions(),
        });
    }
    Ok(())
}

/// Per-pixel maximum over channels of the absolute byte difference.
pub fn diff_map(pre: &RgbImage, post: &RgbImage) -> Result<DiffMap, EvalError> {
    same_dims(pre, post)?;
    let values: Vec<u8> = pre
        .as_raw()
        .chunks_exact(3)
        .zip(post.as_raw().chunks_exact(3))
        .map(|(a, b)| (0..3).map(|c| a[c].abs_diff(b[c])).max().unwrap_or(0))
        .collect();
    let mut histogram = [0u64; 256];
    for &v in &values {
        histogram[v as usize] += 1;
    }
    Ok(DiffMap {
        width: pre.width(),
        height: pre.height(),
        values,
        histogram,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Otsu {
    Threshold(u8),
    /// No `k` in `1..=255` leaves both classes nonempty.
    Degenerate,
}

/// `k* = argmax σ_B²(k)` over `k = 1..=255`, splitting `level <= k` from
/// `level > k`; ties go to the smallest `k`.
///
/// `σ_B²(k)` is proportional to `D² / (n0·n1)` with `D = S0·N − S·n0`
/// (`n0`, `S0` the count and level sum of the low class, `N`, `S` the
/// totals), so candidates are compared exactly in integers: quotient first,
/// then cross-multiplied remainders.
#[allow(clippy::needless_range_loop)]
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<Otsu, EvalError> {
    let n: u64 = histogram.iter().sum();
    if n == 0 {
        return Err(EvalError::EmptyHistogram);
    }
    if n >= OTSU_MAX_PIXELS {
        return Err(EvalError::TooManyPixels(n));
    }
    let s: u128 = histogram.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let (n, mut n0, mut s0) = (n as u128, histogram[0] as u128, 0u128);
    // (quotient, remainder, divisor, k)
    let mut best: Option<(u128, u128, u128, u8)> = None;
    for k in 1..=255usize {
        n0 += histogram[k] as u128;
        s0 += k as u128 * histogram[k] as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (s0 * n).abs_diff(s * n0);
        let (num, den) = (d * d, n0 * n1);
        let (q, r) = (num / den, num % den);
        let better = match best {
            None => true,
            Some((bq, br, bden, _)) => q > bq || (q == bq && r * bden > br * den),
        };
        if better {
            best = Some((q, r, den, k as u8));
        }
    }
    Ok(best.map_or(Otsu::Degenerate, |(.., k)| Otsu::Threshold(k)))
}

/// Background mask `diff <= k*`; all ones when the Otsu split is degenerate.
pub fn background_mask(pre: &RgbImage, post: &RgbImage) -> Result<(BitMask, Otsu), EvalError> {
    let d = diff_map(pre, post)?;
    let otsu = otsu_threshold(&d.histogram)?;
    let mask = match otsu {
        Otsu::Degenerate => BitMask::full(d.width, d.height),
        Otsu::Threshold(k) => BitMask::from_fn(d.width, d.height, |x, y| d.values[(y * d.width + x) as usize] <= k),
    };
    Ok((mask, otsu))
}

fn check_mask(img: &RgbImage, mask: &BitMask) -> Result<(), EvalError> {
    if mask.dimensions() != img.dimensions() {
        return Err(EvalError::DimensionMismatch {
            left: img.dimensions(),
            right: mask.dimensions(),
        });
    }
    if mask.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    Ok(())
}

/// PSNR over the masked pixels, all three channels, capped at
/// [`PSNR_CAP_DB`].
pub fn masked_psnr(pre: &RgbImage, post: &RgbImage, mask: &BitMask) -> Result<f64, EvalError> {
    same_dims(pre, post)?;
    check_mask(pre, mask)?;
    let mut sse = 0u64;
    for (x, y) in mask.iter_ones() {
        let (a, b) = (pre.get_pixel(x, y).0, post.get_pixel(x, y).0);
        for c in 0..3 {
            let d = a[c].abs_diff(b[c]) as u64;
            sse += d * d;
        }
    }
    if sse == 0 {
        return Ok(PSNR_CAP_DB);
    }
    let mse = sse as f64 / (3 * mask.count()) as f64;
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
        .collect()
}

/// Mean SSIM over pixels whose whole 11x11 window lies inside `mask`.
///
/// The five window moments are Gaussian-filtered separably; a supported
/// pixel's vertical pass reads only horizontal results whose own taps lie in
/// its window, so nothing outside `mask` leaks in.
pub fn masked_ssim(pre: &RgbImage, post: &RgbImage, mask: &BitMask, exec: Exec) -> Result<f64, EvalError> {
    same_dims(pre, post)?;
    check_mask(pre, mask)?;
    let support = mask.erode(SSIM_RADIUS);
    if support.is_empty() {
        return Err(EvalError::MaskTooThin);
    }
    let (w, h) = (pre.width() as usize, pre.height() as usize);
    let r = SSIM_RADIUS as usize;
    let k = gaussian_kernel(SSIM_SIGMA);
    debug_assert_eq!(k.len(), 2 * r + 1);
    let (ga, gb) = (luma(pre), luma(post));

    // horizontal pass: [x, y, xx, yy, xy] per pixel, zero where the window
    // would leave the row
    let mut horiz = vec![0.0f64; w * h * 5];
    par::for_each_row(exec, &mut horiz, w * 5, |y, row| {
        for x in r..w.saturating_sub(r) {
            let mut m = [0.0; 5];
            for (i, kv) in k.iter().enumerate() {
                let j = y * w + x + i - r;
                let (a, b) = (ga[j], gb[j]);
                m[0] += kv * a;
                m[1] += kv * b;
                m[2] += kv * a * a;
                m[3] += kv * b * b;
                m[4] += kv * a * b;
            }
            row[x * 5..x * 5 + 5].copy_from_slice(&m);
        }
    });

    let rows: Vec<(f64, u64)> = par::map_range(exec, h, |y| {
        let (mut sum, mut count) = (0.0, 0u64);
        for x in 0..w {
            if !support.get(x as u32, y as u32) {
                continue;
            }
            let mut m = [0.0; 5];
            for (i, kv) in k.iter().enumerate() {
                let base = ((y + i - r) * w + x) * 5;
                for c in 0..5 {
                    m[c] += kv * horiz[base + c];
                }
            }
            sum += ssim_from_moments(m);
            count += 1;
        }
        (sum, count)
    });
    let (sum, count) = rows.iter().fold((0.0, 0u64), |(s, n), (rs, rn)| (s + rs, n + rn));
    Ok(sum / count as f64)
}

/// SSIM from Gaussian-weighted moments `[E x, E y, E x², E y², E xy]`.
pub fn ssim_from_moments(m: [f64; 5]) -> f64 {
    let (mx, my) = (m[0], m[1]);
    let sxx = m[2] - mx * mx;
    let syy = m[3] - my * my;
    let sxy = m[4] - mx * my;
    ((2.0 * mx * my + C1) * (2.0 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// σ_B²(k) = ω0·ω1·(μ0 − μ1)², exactly.
    pub(crate) fn brute_otsu(h: &[u64; 256]) -> Option<u8> {
        let n: u64 = h.iter().sum();
        let big = |v: u64| BigRational::from_integer(BigInt::from(v));
        let mut best: Option<(BigRational, u8)> = None;
        for k in 1..=255usize {
            let n0: u64 = h[..=k].iter().sum();
            let n1 = n - n0;
            if n0 == 0 || n1 == 0 {
                continue;
            }
            let s0: u64 = h[..=k].iter().enumerate().map(|(i, c)| i as u64 * c).sum();
            let s1: u64 = h[k + 1..].iter().enumerate().map(|(i, c)| (i + k + 1) as u64 * c).sum();
            let (w0, w1) = (big(n0) / big(n), big(n1) / big(n));
            let diff = big(s0) / big(n0) - big(s1) / big(n1);
            let var = w0 * w1 * diff.clone() * diff;
            if best.as_ref().is_none_or(|(b, _)| var > *b) {
                best = Some((var, k as u8));
            }
        }
        best.map(|(_, k)| k)
    }

    fn random_hist(rng: &mut ChaCha8Rng) -> [u64; 256] {
        let mut h = [0u64; 256];
        let style = rng.random_range(0..3);
        for (i, v) in h.iter_mut().enumerate() {
            *v = match style {
                0 => rng.random_range(0..1000),
                1 if rng.random_bool(0.05) => rng.random_range(1..100_000),
                2 if i < 40 || rng.random_bool(0.02) => rng.random_range(0..5000),
                _ => 0,
            };
        }
        if h.iter().all(|&v| v == 0) {
            h[rng.random_range(0..256)] = 1;
        }
        h
    }

    #[test]
    fn otsu_matches_exact_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let h = random_hist(&mut rng);
            let want = brute_otsu(&h).map_or(Otsu::Degenerate, Otsu::Threshold);
            assert_eq!(otsu_threshold(&h).unwrap(), want, "{h:?}");
        }
    }

    #[test]
    fn otsu_examples() {
        let mut h = [0u64; 256];
        h[10] = 50;
        h[200] = 50;
        assert_eq!(otsu_threshold(&h).unwrap(), Otsu::Threshold(10));
        let mut one = [0u64; 256];
        one[7] = 9;
        assert_eq!(otsu_threshold(&one).unwrap(), Otsu::Degenerate);
        assert!(matches!(otsu_threshold(&[0; 256]), Err(EvalError::EmptyHistogram)));
    }

    #[test]
    fn diff_and_mask_examples() {
        let a = RgbImage::from_pixel(10, 10, Rgb([100, 100, 100]));
        let d = diff_map(&a, &a).unwrap();
        assert_eq!(d.histogram[0], 100);
        let (m, otsu) = background_mask(&a, &a).unwrap();
        assert!(m.is_full());
        assert_eq!(otsu, Otsu::Degenerate);

        let b = RgbImage::from_fn(10, 10, |x, y| {
            let p = a.get_pixel(x, y).0;
            Rgb([p[0], p[1].saturating_add(5), p[2]])
        });
        assert!(diff_map(&a, &b).unwrap().values.iter().all(|&v| v == 5));

        // 50 pixels at diff 10, 50 at diff 200
        let c = RgbImage::from_fn(10, 10, |_, y| {
            if y < 5 {
                Rgb([110, 100, 100])
            } else {
                Rgb([100, 100, 255])
            }
        });
        let pre = RgbImage::from_pixel(10, 10, Rgb([100, 100, 55]));
        let c = RgbImage::from_fn(10, 10, |x, y| {
            let mut p = c.get_pixel(x, y).0;
            if y < 5 {
                p[2] = 55;
            }
            Rgb(p)
        });
        let (m, otsu) = background_mask(&pre, &c).unwrap();
        assert_eq!(otsu, Otsu::Threshold(10));
        assert_eq!(m, BitMask::from_fn(10, 10, |_, y| y < 5));
        assert!(matches!(
            diff_map(&a, &RgbImage::new(3, 3)),
            Err(EvalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn psnr_examples() {
        let a = RgbImage::from_pixel(16, 16, Rgb([50, 60, 70]));
        let full = BitMask::full(16, 16);
        assert_eq!(masked_psnr(&a, &a, &full).unwrap(), PSNR_CAP_DB);
        let b = RgbImage::from_pixel(16, 16, Rgb([51, 61, 71]));
        let want = 10.0 * 65025f64.log10();
        assert_eq!(masked_psnr(&a, &b, &full).unwrap(), want);
        assert!((want - 48.13).abs() < 0.01);
        // scramble the unmasked half
        let half = BitMask::from_fn(16, 16, |x, _| x < 8);
        let mut c = b.clone();
        for (x, _, p) in c.enumerate_pixels_mut() {
            if x >= 8 {
                *p = Rgb([x as u8 * 13, 7, 250]);
            }
        }
        assert_eq!(masked_psnr(&a, &c, &half).unwrap(), want);
        assert!(matches!(
            masked_psnr(&a, &b, &BitMask::new(16, 16)),
            Err(EvalError::EmptyMask)
        ));
    }

    fn noise_image(seed: u64, w: u32, h: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn ssim_identity_and_thin_masks() {
        let a = noise_image(1, 32, 24);
        assert_eq!(
            masked_ssim(&a, &a, &BitMask::full(32, 24), Exec::Sequential).unwrap(),
            1.0
        );
        let thin = BitMask::from_fn(32, 24, |x, _| x < 10);
        assert!(matches!(
            masked_ssim(&a, &a, &thin, Exec::Sequential),
            Err(EvalError::MaskTooThin)
        ));
    }

    #[test]
    fn ssim_matches_direct_window_evaluation() {
        let a = noise_image(2, 24, 24);
        let b = RgbImage::from_fn(24, 24, |x, y| {
            let p = a.get_pixel(x, y).0;
            Rgb(p.map(|v| v.saturating_add(10)))
        });
        // mask supporting exactly one pixel, (12, 11)
        let mask = BitMask::from_fn(24, 24, |x, y| (7..=17).contains(&x) && (6..=16).contains(&y));
        let got = masked_ssim(&a, &b, &mask, Exec::Sequential).unwrap();

        let (ga, gb) = (luma(&a), luma(&b));
        let k = gaussian_kernel(SSIM_SIGMA);
        let mut m = [0.0; 5];
        for (j, ky) in k.iter().enumerate() {
            for (i, kx) in k.iter().enumerate() {
                let idx = (11 + j - 5) * 24 + 12 + i - 5;
                let wgt = kx * ky;
                let (x, y) = (ga[idx], gb[idx]);
                m[0] += wgt * x;
                m[1] += wgt * y;
                m[2] += wgt * x * x;
                m[3] += wgt * y * y;
                m[4] += wgt * x * y;
            }
        }
        let (mx, my) = (m[0], m[1]);
        let (vx, vy, cxy) = (m[2] - mx * mx, m[3] - my * my, m[4] - mx * my);
        let want = ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!(got < 1.0);
    }

    #[test]
    fn ssim_ignores_pixels_outside_the_mask() {
        let a = noise_image(3, 40, 40);
        let b = noise_image(4, 40, 40);
        let mask = BitMask::from_fn(40, 40, |x, y| x < 25 && y > 5);
        let mut c = b.clone();
        for (x, y, p) in c.enumerate_pixels_mut() {
            if !mask.get(x, y) {
                *p = Rgb([0, 255, 0]);
            }
        }
        let base = masked_ssim(&a, &b, &mask, Exec::Sequential).unwrap();
        assert_eq!(
            base.to_bits(),
            masked_ssim(&a, &c, &mask, Exec::Sequential).unwrap().to_bits()
        );
        assert_eq!(
            base.to_bits(),
            masked_ssim(&a, &b, &mask, Exec::Parallel).unwrap().to_bits()
        );
    }
}
