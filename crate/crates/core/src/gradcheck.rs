//! Finite-difference verification of every analytic gradient in the engine.
//!
//! Each suite builds random double-precision instances, evaluates a scalar
//! loss through the forward functions only, and compares central differences
//! against the analytic backward pass. The error reported per element is
//!
//! ```text
//! |a - n| / max(|a|, |n|, 1e-3 * max_k |n_k|)
//! ```
//!
//! and a suite's score is the maximum over all checked elements and
//! instances. Random inputs are re-drawn whenever they land within a margin
//! of an absolute-value kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imaging::{CocMap, DepthMap, Image};
use crate::losses::{l_rec, l_sharp, l_smooth, sharpness};
use crate::optics::CameraIntrinsics;
use crate::psf::{backward, backward_to_depth, render_focused, PsfWorkspace};

/// Step used for the PSF and depth-chain suites.
pub const PSF_STEP: f64 = 1e-5;
/// Step used for the loss suites.
pub const LOSS_STEP: f64 = 1e-6;
pub const PSF_THRESHOLD: f64 = 1e-5;
pub const CHAIN_THRESHOLD: f64 = 1e-4;
pub const LOSS_THRESHOLD: f64 = 1e-4;

const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub instances: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.threshold
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Largest side length of a random instance; the smallest is 8.
    pub max_size: usize,
    pub instances: usize,
    /// Flip the sign of `xi` in the analytic PSF backward pass.
    pub corrupt_xi: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            max_size: 12,
            instances: 3,
            corrupt_xi: false,
        }
    }
}

/// Maximum per-element relative error between analytic and numeric gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn central<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> Image<f64> {
    Image::from_fn(h, w, ch, |_, _, _| rng.gen()).unwrap()
}

fn random_upstream(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> Image<f64> {
    Image::from_fn(h, w, ch, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
}

fn random_dims(rng: &mut ChaCha8Rng, max_size: usize) -> (usize, usize, usize) {
    let hi = max_size.max(8);
    let ch = if rng.gen_bool(0.5) { 1 } else { 3 };
    (rng.gen_range(8..=hi), rng.gen_range(8..=hi), ch)
}

/// Errors of `dL/dI` and `dL/dC` for `L = <G, render(I, C)>` on one random
/// instance with CoC values in `[1.5, 5]` and a 7×7 kernel.
pub fn psf_instance(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize, corrupt_xi: bool) -> Result<(f64, f64)> {
    let img = random_image(rng, h, w, ch);
    let coc = CocMap::from_values(h, w, (0..h * w).map(|_| rng.gen_range(1.5..5.0)).collect())?;
    let upstream = random_upstream(rng, h, w, ch);
    let mut ws = PsfWorkspace::new(7)?;
    let j = render_focused(&img, &coc, &mut ws)?;
    ws.corrupt_xi_sign(corrupt_xi);
    let grads = backward(&upstream, &img, &coc, &j, &mut ws)?;
    ws.corrupt_xi_sign(false);

    let mut loss = |img: &Image<f64>, coc: &CocMap<f64>| {
        dot(upstream.data(), render_focused(img, coc, &mut ws).unwrap().data())
    };
    let mut numeric_image = Vec::with_capacity(img.data().len());
    for i in 0..img.data().len() {
        let x0 = img.data()[i];
        numeric_image.push(central(
            |x| {
                let mut d = img.data().to_vec();
                d[i] = x;
                loss(&Image::new(h, w, ch, d).unwrap(), &coc)
            },
            x0,
            PSF_STEP,
        ));
    }
    let mut numeric_coc = Vec::with_capacity(h * w);
    for i in 0..h * w {
        numeric_coc.push(central(
            |c| loss(&img, &coc.with_value(i, c).unwrap()),
            coc.values()[i],
            PSF_STEP,
        ));
    }
    Ok((
        max_relative_error(grads.d_image.data(), &numeric_image),
        max_relative_error(grads.d_coc.data(), &numeric_coc),
    ))
}

/// Camera and depth range whose CoC stays inside `[1.5, 5]` pixels on both
/// sides of the focus plane with a 7×7 kernel.
pub fn chain_camera() -> CameraIntrinsics<f64> {
    CameraIntrinsics::new(35.0, 2.8, 2.0, 5.0).unwrap()
}

fn chain_depth(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen_bool(0.5) {
        rng.gen_range(1.25..1.65)
    } else {
        rng.gen_range(2.6..5.2)
    }
}

/// Error of `dL/d depth` for `L = <G, render(I, coc_map(depth))>`.
pub fn depth_chain_instance(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize, corrupt_xi: bool) -> Result<f64> {
    let cam = chain_camera();
    let img = random_image(rng, h, w, ch);
    let depth = DepthMap::from_fn(h, w, |_, _| chain_depth(rng))?;
    let upstream = random_upstream(rng, h, w, ch);
    let mut ws = PsfWorkspace::for_camera(&cam);
    let coc = cam.coc_map(&depth);
    let j = render_focused(&img, &coc, &mut ws)?;
    ws.corrupt_xi_sign(corrupt_xi);
    let grads = backward(&upstream, &img, &coc, &j, &mut ws)?;
    ws.corrupt_xi_sign(false);
    let analytic = backward_to_depth(&grads, &cam, &depth)?;

    let mut numeric = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let d0 = depth.data()[i];
        numeric.push(central(
            |d| {
                let mut data = depth.data().to_vec();
                data[i] = d;
                let coc = cam.coc_map(&DepthMap::new(h, w, data).unwrap());
                dot(upstream.data(), render_focused(&img, &coc, &mut ws).unwrap().data())
            },
            d0,
            PSF_STEP * d0,
        ));
    }
    Ok(max_relative_error(analytic.data(), &numeric))
}

fn numeric_image_gradient(img: &Image<f64>, mut f: impl FnMut(&Image<f64>) -> f64) -> Vec<f64> {
    (0..img.data().len())
        .map(|i| {
            central(
                |x| {
                    let mut d = img.data().to_vec();
                    d[i] = x;
                    f(&Image::new(img.height(), img.width(), img.channels(), d).unwrap())
                },
                img.data()[i],
                LOSS_STEP,
            )
        })
        .collect()
}

/// Random pair with every sample difference at least the kink margin away
/// from zero.
fn pair_away_from_ties(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> (Image<f64>, Image<f64>) {
    loop {
        let a = random_image(rng, h, w, ch);
        let b = random_image(rng, h, w, ch);
        if a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() > KINK_MARGIN) {
            return (a, b);
        }
    }
}

pub fn rec_instance(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> Result<f64> {
    let (a, b) = pair_away_from_ties(rng, h, w, ch);
    let alpha = rng.gen_range(0.2..0.9);
    let (_, analytic) = l_rec(&a, &b, alpha)?;
    let numeric = numeric_image_gradient(&a, |x| l_rec(x, &b, alpha).unwrap().0);
    Ok(max_relative_error(analytic.data(), &numeric))
}

fn sharp_kink_free(a: &Image<f64>, b: &Image<f64>) -> bool {
    let sa = sharpness(a);
    let sb = sharpness(b);
    if sa.data().iter().zip(sb.data()).any(|(x, y)| (x - y).abs() < KINK_MARGIN) {
        return false;
    }
    // |I - mu| kink of the contrast term
    let lum = a.luminance();
    let (h, w) = (a.height(), a.width());
    (0..h * w).all(|p| {
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        let mut sum = 0.0;
        for dy in -3..=3isize {
            for dx in -3..=3isize {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                sum += lum[yy * w + xx];
            }
        }
        (lum[p] - sum / 49.0).abs() > KINK_MARGIN
    })
}

pub fn sharp_instance(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> Result<f64> {
    let (a, b) = loop {
        let a = random_image(rng, h, w, ch);
        let b = random_image(rng, h, w, ch);
        if sharp_kink_free(&a, &b) {
            break (a, b);
        }
    };
    let (_, analytic) = l_sharp(&a, &b)?;
    let numeric = numeric_image_gradient(&a, |x| l_sharp(x, &b).unwrap().0);
    Ok(max_relative_error(analytic.data(), &numeric))
}

pub fn smooth_instance(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> Result<f64> {
    let img = random_image(rng, h, w, ch);
    let depth = loop {
        let d = DepthMap::from_fn(h, w, |_, _| rng.gen_range(1.0..10.0f64))?;
        let ties = (0..h * w).any(|p| {
            let (y, x) = (p / w, p % w);
            (x + 1 < w && (d.data()[p + 1] - d.data()[p]).abs() < KINK_MARGIN)
                || (y + 1 < h && (d.data()[p + w] - d.data()[p]).abs() < KINK_MARGIN)
        });
        if !ties {
            break d;
        }
    };
    let (_, analytic) = l_smooth(&depth, &img)?;
    let numeric: Vec<f64> = (0..h * w)
        .map(|i| {
            central(
                |v| {
                    let mut d = depth.data().to_vec();
                    d[i] = v;
                    l_smooth(&DepthMap::new(h, w, d).unwrap(), &img).unwrap().0
                },
                depth.data()[i],
                LOSS_STEP,
            )
        })
        .collect();
    Ok(max_relative_error(analytic.data(), &numeric))
}

/// Runs every suite and returns one result per suite, in a fixed order.
pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = [0.0f64; 6];
    for _ in 0..cfg.instances {
        let (h, w, ch) = random_dims(&mut rng, cfg.max_size);
        let (ei, ec) = psf_instance(&mut rng, h, w, ch, cfg.corrupt_xi)?;
        let chain = depth_chain_instance(&mut rng, h, w, ch, cfg.corrupt_xi)?;
        let rec = rec_instance(&mut rng, h, w, ch)?;
        let sharp = sharp_instance(&mut rng, h, w, ch)?;
        let smooth = smooth_instance(&mut rng, h, w, ch)?;
        for (slot, e) in worst.iter_mut().zip([ei, ec, chain, rec, sharp, smooth]) {
            // NaN must stick
            *slot = if e.is_nan() || slot.is_nan() { f64::NAN } else { slot.max(e) };
        }
    }
    let names = [
        ("psf_d_image", PSF_THRESHOLD),
        ("psf_d_coc", PSF_THRESHOLD),
        ("depth_chain", CHAIN_THRESHOLD),
        ("loss_rec", LOSS_THRESHOLD),
        ("loss_sharp", LOSS_THRESHOLD),
        ("loss_smooth", LOSS_THRESHOLD),
    ];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(&(name, threshold), max_rel_error)| SuiteResult {
            name,
            max_rel_error,
            threshold,
            instances: cfg.instances,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_measure() {
        assert_eq!(max_relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((max_relative_error(&[1.1], &[1.0]) - 0.1 / 1.1).abs() < 1e-15);
        // tiny entries are measured against the floor
        assert!(max_relative_error(&[1.0, 2e-6], &[1.0, 1e-6]) < 1.1e-3);
    }

    #[test]
    fn default_run_passes_and_corruption_fails() {
        let results = run_all(&GradcheckConfig::default()).unwrap();
        for r in &results {
            assert!(r.passed(), "{r:?}");
        }
        let cfg = GradcheckConfig {
            corrupt_xi: true,
            instances: 1,
            ..Default::default()
        };
        let results = run_all(&cfg).unwrap();
        assert!(!results[1].passed());
        assert!(!results[2].passed());
        assert!(results[0].passed());
    }
}
