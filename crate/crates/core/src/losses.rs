//! Training objective for the rendered image and the depth map, with
//! analytic gradients.
//!
//! * reconstruction: `mean_p [ alpha (1 - SSIM_p) / 2 + (1 - alpha) mean_c |Jhat - J| ]`
//! * smoothness: `mean_p [ |dx D| exp(-|dx I|) + |dy D| exp(-|dy I|) ]` with forward differences
//! * sharpness: `mean_p |S(Jhat) - S(J)|`, `S = -lap(I) - |(I - mu) / mu| - (I - mu)^2`
//!
//! `mu` is the 7×7 box mean. Smoothness and sharpness operate on the channel
//! mean. The L1 and absolute-value kinks use the zero subgradient.

use crate::error::{Error, Result};
use crate::imaging::{DepthMap, Image, ManifestBlock, ScalarField};
use crate::scalar::Real;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SHARPNESS_WINDOW: usize = 7;
const CONTRAST_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights<T> {
    /// Share of the SSIM term in the reconstruction loss.
    pub alpha: T,
    pub lambda_rec: T,
    pub lambda_smooth: T,
    pub lambda_sharp: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        LossWeights {
            alpha: T::lit(0.85),
            lambda_rec: T::one(),
            lambda_smooth: T::lit(1e-3),
            lambda_sharp: T::lit(1e-1),
        }
    }
}

impl<T: Real> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.lambda_rec, self.lambda_smooth, self.lambda_sharp];
        if all.iter().any(|v| !v.is_finite() || *v < T::zero()) || self.alpha > T::one() {
            return Err(Error::InvalidValue(format!(
                "loss weights must be non-negative with alpha <= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Applies `alpha`, `lambda_rec`, `lambda_smooth`, `lambda_sharp` entries
    /// from a manifest `loss { ... }` block.
    pub fn with_overrides(mut self, block: &ManifestBlock) -> Result<Self> {
        let get = |k: &str| block.get_f64(k).map_err(Error::InvalidValue);
        if let Some(v) = get("alpha")? {
            self.alpha = T::lit(v);
        }
        if let Some(v) = get("lambda_rec")? {
            self.lambda_rec = T::lit(v);
        }
        if let Some(v) = get("lambda_smooth")? {
            self.lambda_smooth = T::lit(v);
        }
        if let Some(v) = get("lambda_sharp")? {
            self.lambda_sharp = T::lit(v);
        }
        self.validate()?;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport<T> {
    pub total: T,
    pub rec: T,
    pub smooth: T,
    pub sharp: T,
}

impl<T: Real> LossReport<T> {
    pub fn weighted(rec: T, smooth: T, sharp: T, weights: &LossWeights<T>) -> Self {
        LossReport {
            total: weights.lambda_rec * rec + weights.lambda_smooth * smooth + weights.lambda_sharp * sharp,
            rec,
            smooth,
            sharp,
        }
    }
}

#[inline]
fn sgn<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn channel_plane<T: Real>(img: &Image<T>, c: usize) -> Vec<T> {
    img.data().iter().skip(c).step_by(img.channels()).copied().collect()
}

// ---------------------------------------------------------------------------
// separable filters on H×W planes

/// Truncated Gaussian, renormalised over the in-bounds taps at every pixel.
struct GaussianFilter<T> {
    taps: Vec<T>,
}

impl<T: Real> GaussianFilter<T> {
    fn new(size: usize, sigma: f64) -> Self {
        let half = (size / 2) as f64;
        let taps = (0..size)
            .map(|k| {
                let d = k as f64 - half;
                T::lit((-d * d / (2.0 * sigma * sigma)).exp())
            })
            .collect();
        GaussianFilter { taps }
    }

    fn half(&self) -> isize {
        (self.taps.len() / 2) as isize
    }

    /// 1D pass along a strided line of length `n`.
    fn line(&self, src: &[T], dst: &mut [T], n: usize, step: usize, base: usize, adjoint: bool) {
        let half = self.half();
        if adjoint {
            for i in 0..n {
                dst[base + i * step] = T::zero();
            }
        }
        for i in 0..n as isize {
            let lo = (i - half).max(0);
            let hi = (i + half).min(n as isize - 1);
            let z = (lo..=hi).fold(T::zero(), |a, k| a + self.taps[(k - i + half) as usize]);
            if adjoint {
                let y = src[base + i as usize * step] / z;
                for k in lo..=hi {
                    let idx = base + k as usize * step;
                    dst[idx] = dst[idx] + self.taps[(k - i + half) as usize] * y;
                }
            } else {
                let acc = (lo..=hi).fold(T::zero(), |a, k| {
                    a + self.taps[(k - i + half) as usize] * src[base + k as usize * step]
                });
                dst[base + i as usize * step] = acc / z;
            }
        }
    }

    fn apply_impl(&self, x: &[T], h: usize, w: usize, adjoint: bool) -> Vec<T> {
        let mut tmp = vec![T::zero(); h * w];
        let mut out = vec![T::zero(); h * w];
        if !adjoint {
            for y in 0..h {
                self.line(x, &mut tmp, w, 1, y * w, false);
            }
            for c in 0..w {
                self.line(&tmp, &mut out, h, w, c, false);
            }
        } else {
            for c in 0..w {
                self.line(x, &mut tmp, h, w, c, true);
            }
            for y in 0..h {
                self.line(&tmp, &mut out, w, 1, y * w, true);
            }
        }
        out
    }

    fn apply(&self, x: &[T], h: usize, w: usize) -> Vec<T> {
        self.apply_impl(x, h, w, false)
    }

    fn adjoint(&self, y: &[T], h: usize, w: usize) -> Vec<T> {
        self.apply_impl(y, h, w, true)
    }
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Box mean with replicate padding, and its adjoint.
fn box_mean<T: Real>(x: &[T], h: usize, w: usize, size: usize, adjoint: bool) -> Vec<T> {
    let half = (size / 2) as isize;
    let inv = T::one() / T::from_usize_lossy(size);
    let mut tmp = vec![T::zero(); h * w];
    let mut out = vec![T::zero(); h * w];
    // rows then columns; the adjoint runs the transposed passes in reverse
    let pass = |src: &[T], dst: &mut [T], along_rows: bool| {
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx] * inv;
                for k in -half..=half {
                    let (ty, tx) = if along_rows {
                        (y, clamp_index(xx as isize + k, w))
                    } else {
                        (clamp_index(y as isize + k, h), xx)
                    };
                    if adjoint {
                        dst[ty * w + tx] = dst[ty * w + tx] + v;
                    } else {
                        dst[y * w + xx] = dst[y * w + xx] + src[ty * w + tx] * inv;
                    }
                }
            }
        }
    };
    if adjoint {
        pass(x, &mut tmp, false);
        pass(&tmp, &mut out, true);
    } else {
        pass(x, &mut tmp, true);
        pass(&tmp, &mut out, false);
    }
    out
}

/// 5-point Laplacian with replicate padding, and its adjoint.
fn laplacian<T: Real>(x: &[T], h: usize, w: usize, adjoint: bool) -> Vec<T> {
    let mut out = vec![T::zero(); h * w];
    let four = T::lit(4.0);
    for y in 0..h {
        for xx in 0..w {
            let p = y * w + xx;
            let neighbours = [
                y * w + clamp_index(xx as isize - 1, w),
                y * w + clamp_index(xx as isize + 1, w),
                clamp_index(y as isize - 1, h) * w + xx,
                clamp_index(y as isize + 1, h) * w + xx,
            ];
            if adjoint {
                for q in neighbours {
                    out[q] = out[q] + x[p];
                }
                out[p] = out[p] - four * x[p];
            } else {
                out[p] = neighbours.iter().fold(T::zero(), |a, &q| a + x[q]) - four * x[p];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// SSIM

/// Per-pixel SSIM of one channel and, when `upstream` is given, the gradient
/// of `sum_p upstream[p] * SSIM[p]` with respect to `a`.
fn ssim_channel<T: Real>(
    a: &[T],
    b: &[T],
    h: usize,
    w: usize,
    upstream: Option<&[T]>,
) -> (Vec<T>, Option<Vec<T>>) {
    let filter = GaussianFilter::<T>::new(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let two = T::lit(2.0);
    let sq = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&p, &q)| p * q).collect::<Vec<T>>();
    let mu_a = filter.apply(a, h, w);
    let mu_b = filter.apply(b, h, w);
    let e_aa = filter.apply(&sq(a, a), h, w);
    let e_bb = filter.apply(&sq(b, b), h, w);
    let e_ab = filter.apply(&sq(a, b), h, w);

    let n = h * w;
    let mut ssim = Vec::with_capacity(n);
    let mut g_mu = Vec::new();
    let mut g_eaa = Vec::new();
    let mut g_eab = Vec::new();
    for p in 0..n {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let var_a = e_aa[p] - ma * ma;
        let var_b = e_bb[p] - mb * mb;
        let cov = e_ab[p] - ma * mb;
        let l = two * ma * mb + c1;
        let m = two * cov + c2;
        let pp = ma * ma + mb * mb + c1;
        let q = var_a + var_b + c2;
        let s = l * m / (pp * q);
        ssim.push(s);
        if let Some(up) = upstream {
            let g = up[p];
            let ds_dmu = two * mb * m / (pp * q) - s * two * ma / pp;
            let ds_dcov = two * l / (pp * q);
            let ds_dvar = -s / q;
            // mu_a, E[a^2], E[ab] are the filter outputs that depend on a
            g_mu.push(g * (ds_dmu - two * ma * ds_dvar - mb * ds_dcov));
            g_eaa.push(g * ds_dvar);
            g_eab.push(g * ds_dcov);
        }
    }
    let grad = upstream.map(|_| {
        let t_mu = filter.adjoint(&g_mu, h, w);
        let t_aa = filter.adjoint(&g_eaa, h, w);
        let t_ab = filter.adjoint(&g_eab, h, w);
        (0..n)
            .map(|q| t_mu[q] + two * a[q] * t_aa[q] + b[q] * t_ab[q])
            .collect()
    });
    (ssim, grad)
}

/// Per-pixel SSIM (11×11 Gaussian window, σ = 1.5), averaged over channels.
pub fn ssim_map<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<ScalarField<T>> {
    a.ensure_same_shape(b, "ssim")?;
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    let mut acc = vec![T::zero(); h * w];
    for c in 0..ch {
        let (s, _) = ssim_channel(&channel_plane(a, c), &channel_plane(b, c), h, w, None);
        for (o, v) in acc.iter_mut().zip(s) {
            *o = *o + v;
        }
    }
    let inv = T::one() / T::from_usize_lossy(ch);
    ScalarField::new(h, w, acc.into_iter().map(|v| v * inv).collect())
}

/// Reconstruction loss and its gradient with respect to `j_hat`.
pub fn l_rec<T: Real>(j_hat: &Image<T>, j: &Image<T>, alpha: T) -> Result<(T, Image<T>)> {
    j_hat.ensure_same_shape(j, "reconstruction loss")?;
    let (h, w, ch) = (j_hat.height(), j_hat.width(), j_hat.channels());
    let n = T::from_usize_lossy(h * w);
    let nc = n * T::from_usize_lossy(ch);
    let half = T::lit(0.5);

    let mut grad = vec![T::zero(); h * w * ch];
    let mut ssim_sum = T::zero();
    let ssim_weight = vec![-alpha * half / nc; h * w];
    for c in 0..ch {
        let (s, g) = ssim_channel(&channel_plane(j_hat, c), &channel_plane(j, c), h, w, Some(&ssim_weight));
        ssim_sum = ssim_sum + s.into_iter().sum::<T>();
        for (p, gv) in g.unwrap().into_iter().enumerate() {
            grad[p * ch + c] = gv;
        }
    }
    let ssim_term = alpha * half * (n - ssim_sum / T::from_usize_lossy(ch)) / n;

    let l1_coef = (T::one() - alpha) / nc;
    let mut l1 = T::zero();
    for ((g, &a), &b) in grad.iter_mut().zip(j_hat.data()).zip(j.data()) {
        let d = a - b;
        l1 = l1 + d.abs();
        *g = *g + l1_coef * sgn(d);
    }
    let value = ssim_term + l1 * l1_coef;
    Ok((value, Image::new(h, w, ch, grad)?))
}

/// Edge-aware depth smoothness and its gradient with respect to depth.
pub fn l_smooth<T: Real>(depth: &DepthMap<T>, img: &Image<T>) -> Result<(T, ScalarField<T>)> {
    img.ensure_plane(depth.height(), depth.width(), "smoothness loss")?;
    let (h, w) = (depth.height(), depth.width());
    let lum = img.luminance();
    let d = depth.data();
    let inv_n = T::one() / T::from_usize_lossy(h * w);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); h * w];
    let mut term = |p: usize, q: usize| {
        let dd = d[q] - d[p];
        let edge = (-(lum[q] - lum[p]).abs()).exp();
        value = value + dd.abs() * edge;
        let g = sgn(dd) * edge * inv_n;
        grad[q] = grad[q] + g;
        grad[p] = grad[p] - g;
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                term(p, p + 1);
            }
            if y + 1 < h {
                term(p, p + w);
            }
        }
    }
    Ok((value * inv_n, ScalarField::new(h, w, grad)?))
}

struct SharpnessParts<T> {
    s: Vec<T>,
    mu: Vec<T>,
    lum: Vec<T>,
}

fn sharpness_parts<T: Real>(img: &Image<T>) -> SharpnessParts<T> {
    let (h, w) = (img.height(), img.width());
    let lum = img.luminance();
    let mu = box_mean(&lum, h, w, SHARPNESS_WINDOW, false);
    let lap = laplacian(&lum, h, w, false);
    let eps = T::lit(CONTRAST_EPS);
    let s = (0..h * w)
        .map(|p| {
            let dev = lum[p] - mu[p];
            -lap[p] - (dev / mu[p].max(eps)).abs() - dev * dev
        })
        .collect();
    SharpnessParts { s, mu, lum }
}

/// Per-pixel sharpness `-lap(I) - |(I - mu)/mu| - (I - mu)^2` of the channel
/// mean, with 7×7 box means and replicate padding.
pub fn sharpness<T: Real>(img: &Image<T>) -> ScalarField<T> {
    ScalarField::new(img.height(), img.width(), sharpness_parts(img).s)
        .expect("sharpness of a finite image is finite")
}

/// Mean absolute sharpness difference and its gradient with respect to
/// `j_hat`.
pub fn l_sharp<T: Real>(j_hat: &Image<T>, j: &Image<T>) -> Result<(T, Image<T>)> {
    j_hat.ensure_same_shape(j, "sharpness loss")?;
    let (h, w, ch) = (j_hat.height(), j_hat.width(), j_hat.channels());
    let inv_n = T::one() / T::from_usize_lossy(h * w);
    let pred = sharpness_parts(j_hat);
    let target = sharpness(j);
    let eps = T::lit(CONTRAST_EPS);
    let two = T::lit(2.0);

    let mut value = T::zero();
    let mut upstream = Vec::with_capacity(h * w);
    for (&a, &b) in pred.s.iter().zip(target.data()) {
        value = value + (a - b).abs();
        upstream.push(sgn(a - b) * inv_n);
    }

    // dS = -lap(dI) + a dI + b dmu, with mu = box(I)
    let mut direct = vec![T::zero(); h * w];
    let mut via_mu = vec![T::zero(); h * w];
    for p in 0..h * w {
        let g = upstream[p];
        let dev = pred.lum[p] - pred.mu[p];
        let guarded = pred.mu[p].max(eps);
        let r_sign = sgn(dev);
        let mut coef_mu = r_sign / guarded + two * dev;
        if pred.mu[p] > eps {
            coef_mu = coef_mu + r_sign * dev / (guarded * guarded);
        }
        direct[p] = g * (-r_sign / guarded - two * dev);
        via_mu[p] = g * coef_mu;
    }
    let lap_t = laplacian(&upstream, h, w, true);
    let box_t = box_mean(&via_mu, h, w, SHARPNESS_WINDOW, true);
    let inv_c = T::one() / T::from_usize_lossy(ch);
    let mut grad = Vec::with_capacity(h * w * ch);
    for p in 0..h * w {
        let g = (direct[p] - lap_t[p] + box_t[p]) * inv_c;
        grad.extend(std::iter::repeat(g).take(ch));
    }
    Ok((value * inv_n, Image::new(h, w, ch, grad)?))
}

/// Gradients returned by [`total_loss`].
#[derive(Clone, Debug)]
pub struct LossGradients<T> {
    /// d total / d rendered image (reconstruction and sharpness terms).
    pub d_j_hat: Image<T>,
    /// Direct d total / d depth (smoothness term only).
    pub d_depth_direct: ScalarField<T>,
}

/// Weighted sum of the three losses and its gradients.
pub fn total_loss<T: Real>(
    j_hat: &Image<T>,
    j: &Image<T>,
    depth: &DepthMap<T>,
    img: &Image<T>,
    weights: &LossWeights<T>,
) -> Result<(LossReport<T>, LossGradients<T>)> {
    weights.validate()?;
    let (rec, g_rec) = l_rec(j_hat, j, weights.alpha)?;
    let (sharp, g_sharp) = l_sharp(j_hat, j)?;
    let (smooth, g_smooth) = l_smooth(depth, img)?;
    let d_j_hat = Image::new(
        j_hat.height(),
        j_hat.width(),
        j_hat.channels(),
        g_rec
            .data()
            .iter()
            .zip(g_sharp.data())
            .map(|(&r, &s)| weights.lambda_rec * r + weights.lambda_sharp * s)
            .collect(),
    )?;
    let d_depth_direct = ScalarField::new(
        depth.height(),
        depth.width(),
        g_smooth.data().iter().map(|&g| weights.lambda_smooth * g).collect(),
    )?;
    Ok((
        LossReport::weighted(rec, smooth, sharp, weights),
        LossGradients {
            d_j_hat,
            d_depth_direct,
        },
    ))
}
