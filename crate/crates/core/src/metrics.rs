//! Depth-estimation and image-quality metrics.

use crate::error::{Error, Result};
use crate::imaging::{DepthMap, Image};
use crate::losses::ssim_map;
use crate::scalar::Real;

/// Lower clamp applied to predictions when a depth cap is given.
pub const MIN_EVAL_DEPTH_M: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics<T> {
    pub abs_rel: T,
    pub sq_rel: T,
    pub rmse: T,
    pub rmse_log: T,
    pub log10: T,
    pub delta1: T,
    pub delta2: T,
    pub delta3: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics<T> {
    /// Decibels; `+inf` when the images are identical.
    pub psnr: T,
    pub ssim: T,
}

fn check_depth_shapes<T: Real>(pred: &DepthMap<T>, gt: &DepthMap<T>, mask: Option<&[bool]>) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if let Some(m) = mask {
        if m.len() != gt.data().len() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries, maps have {}",
                m.len(),
                gt.data().len()
            )));
        }
    }
    Ok(())
}

/// Standard depth errors over the masked pixels.
///
/// With `cap`, pixels whose ground truth exceeds the cap are excluded and
/// predictions are clamped to `[MIN_EVAL_DEPTH_M, cap]`. The δ thresholds use
/// a strict inequality: `max(p/g, g/p) < 1.25^k`.
pub fn depth_metrics<T: Real>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    mask: Option<&[bool]>,
    cap: Option<T>,
) -> Result<DepthMetrics<T>> {
    check_depth_shapes(pred, gt, mask)?;
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut se, mut se_log, mut log10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (mut p, g) = (p.to_f64_lossy(), g.to_f64_lossy());
        if let Some(cap) = cap {
            let cap = cap.to_f64_lossy();
            if g > cap {
                continue;
            }
            p = p.clamp(MIN_EVAL_DEPTH_M, cap);
        }
        n += 1;
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        se += d * d;
        se_log += (p.ln() - g.ln()).powi(2);
        log10 += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        for (k, hit) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *hit += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidValue("no valid pixels to evaluate".into()));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: T::lit(abs_rel / nf),
        sq_rel: T::lit(sq_rel / nf),
        rmse: T::lit((se / nf).sqrt()),
        rmse_log: T::lit((se_log / nf).sqrt()),
        log10: T::lit(log10 / nf),
        delta1: T::lit(hits[0] as f64 / nf),
        delta2: T::lit(hits[1] as f64 / nf),
        delta3: T::lit(hits[2] as f64 / nf),
    })
}

/// PSNR over the unit range; `+inf` for identical images.
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    a.ensure_same_shape(b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(T::infinity());
    }
    Ok(T::lit(-10.0 * mse.log10()))
}

pub fn image_metrics<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<ImageMetrics<T>> {
    Ok(ImageMetrics {
        psnr: psnr(a, b)?,
        ssim: ssim_map(a, b)?.mean(),
    })
}

/// Sample Pearson correlation over the masked pixels.
pub fn pearson<T: Real>(pred: &DepthMap<T>, gt: &DepthMap<T>, mask: Option<&[bool]>) -> Result<T> {
    check_depth_shapes(pred, gt, mask)?;
    let pairs: Vec<(f64, f64)> = pred
        .data()
        .iter()
        .zip(gt.data())
        .enumerate()
        .filter(|(i, _)| mask.map_or(true, |m| m[*i]))
        .map(|(_, (&p, &g))| (p.to_f64_lossy(), g.to_f64_lossy()))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::InvalidValue("pearson needs at least two pixels".into()));
    }
    let n = pairs.len() as f64;
    let mp = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mg = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for &(p, g) in &pairs {
        cov += (p - mp) * (g - mg);
        vp += (p - mp) * (p - mp);
        vg += (g - mg) * (g - mg);
    }
    if vp == 0.0 || vg == 0.0 {
        return Err(Error::InvalidValue("zero variance".into()));
    }
    Ok(T::lit((cov / (vp.sqrt() * vg.sqrt())).clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_depth(seed: u64, h: usize, w: usize) -> DepthMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DepthMap::from_fn(h, w, |_, _| rng.gen_range(0.5..80.0)).unwrap()
    }

    fn scaled(d: &DepthMap<f64>, f: impl Fn(usize, f64) -> f64) -> DepthMap<f64> {
        DepthMap::new(
            d.height(),
            d.width(),
            d.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = random_depth(1, 6, 6);
        let m = depth_metrics(&gt, &gt, None, None).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.log10), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn delta_boundary_is_strict() {
        let gt = DepthMap::from_fn(4, 4, |y, x| 1.0 + (y * 4 + x) as f64 * 0.25).unwrap();
        let pred = scaled(&gt, |_, v| 1.25 * v);
        let m = depth_metrics(&pred, &gt, None, None).unwrap();
        assert_eq!(m.delta1, 0.0);
        assert_eq!((m.delta2, m.delta3), (1.0, 1.0));
        assert!((m.abs_rel - 0.25).abs() < 1e-12);

        let half = scaled(&gt, |i, v| if i % 2 == 0 { v } else { 2.0 * v });
        assert_eq!(depth_metrics(&half, &gt, None, None).unwrap().delta1, 0.5);
    }

    #[test]
    fn invariances() {
        let gt = random_depth(2, 8, 8);
        let pred = random_depth(3, 8, 8);
        let a = depth_metrics(&pred, &gt, None, None).unwrap();
        let b = depth_metrics(&gt, &pred, None, None).unwrap();
        assert_eq!((a.delta1, a.delta2, a.delta3), (b.delta1, b.delta2, b.delta3));

        let c = 3.5;
        let s = depth_metrics(&scaled(&pred, |_, v| c * v), &scaled(&gt, |_, v| c * v), None, None).unwrap();
        for (x, y) in [(a.abs_rel, s.abs_rel), (a.rmse_log, s.rmse_log), (a.log10, s.log10)] {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!((a.delta1, a.delta2), (s.delta1, s.delta2));
        assert!((s.rmse - c * a.rmse).abs() < 1e-9);
        assert!((s.sq_rel - c * a.sq_rel).abs() < 1e-9);
        let p0 = pearson(&pred, &gt, None).unwrap();
        let p1 = pearson(&scaled(&pred, |_, v| c * v), &scaled(&gt, |_, v| c * v), None).unwrap();
        assert!((p0 - p1).abs() < 1e-12);
    }

    #[test]
    fn cap_excludes_far_ground_truth() {
        let gt = DepthMap::new(1, 4, vec![10.0, 50.0, 75.0, 78.0]).unwrap();
        let pred = DepthMap::new(1, 4, vec![10.0, 50.0, 90.0, 90.0]).unwrap();
        let c80 = depth_metrics(&pred, &gt, None, Some(80.0)).unwrap();
        let c70 = depth_metrics(&pred, &gt, None, Some(70.0)).unwrap();
        assert_eq!(c70.abs_rel, 0.0);
        assert!(c80.abs_rel > 0.0);
        let mask = [false; 4];
        assert!(depth_metrics(&pred, &gt, Some(&mask), None).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, 3, 0.3).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let m = image_metrics(&a, &a).unwrap();
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_examples() {
        let gt = random_depth(4, 10, 10);
        let lin = scaled(&gt, |_, v| 2.0 * v + 3.0);
        assert!((pearson(&lin, &gt, None).unwrap() - 1.0).abs() < 1e-12);
        let neg = scaled(&gt, |_, v| 100.0 - v);
        assert!((pearson(&neg, &gt, None).unwrap() + 1.0).abs() < 1e-12);

        let a = random_depth(5, 100, 100);
        let b = random_depth(6, 100, 100);
        assert!(pearson(&a, &b, None).unwrap().abs() < 0.05);
        let flat = DepthMap::constant(10, 10, 1.0).unwrap();
        assert!(pearson(&flat, &gt, None).is_err());
    }
}
