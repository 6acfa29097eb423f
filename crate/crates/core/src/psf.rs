//! Spatially-varying Gaussian point-spread-function layer.
//!
//! Each source pixel spreads its intensity with an isotropic Gaussian whose
//! diameter is that pixel's circle of confusion:
//!
//! ```text
//! w(u, v; c) = 2 / (pi c^2) * exp(-2 (u^2 + v^2) / c^2)
//! J[p] = sum_o I[p - o] w(o; C[p - o]) / sum_o w(o; C[p - o])
//! ```
//!
//! where `o` ranges over the m×m offsets of the kernel window. Offsets that
//! fall outside the image contribute to neither sum, so borders are
//! renormalised rather than darkened. Sub-pixel (delta) sources contribute
//! weight 1 at the zero offset only.
//!
//! The backward pass follows from the quotient rule. With `D[q]` the
//! denominator at output `q`:
//!
//! ```text
//! dJ[q]/dI[p] = w(q - p; C[p]) / D[q]
//! dJ[q]/dC[p] = xi(q - p; C[p]) (I[p] - J[q]) w(q - p; C[p]) / D[q]
//! xi(o; c)    = (4 |o|^2 - 2 c^2) / c^3
//! ```
//!
//! Both passes are written as gathers (forward over sources, backward over
//! outputs), so rows can be processed in parallel without shared
//! accumulators, and every per-pixel sum runs over the window in the same
//! row-major offset order whether or not the row loop is parallel.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{CocMap, CocState, DepthMap, Image, ScalarField};
use crate::optics::CameraIntrinsics;
use crate::scalar::Real;

/// Largest supported kernel half-width.
pub const MAX_HALF: usize = 31;

/// Gaussian PSF weight at integer offset `(u, v)` for diameter `c >= 1`.
#[inline]
pub fn gaussian_weight<T: Real>(u: isize, v: isize, c: T) -> T {
    let r2 = T::from_isize(u * u + v * v).unwrap();
    let c2 = c * c;
    T::lit(2.0) / (T::PI() * c2) * (T::lit(-2.0) * r2 / c2).exp()
}

/// `d w / d c` divided by `w`.
#[inline]
fn xi<T: Real>(r2: T, c: T) -> T {
    (T::lit(4.0) * r2 - T::lit(2.0) * c * c) / (c * c * c)
}

/// Analytic gradients of a scalar loss through one render.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair<T> {
    pub d_image: Image<T>,
    pub d_coc: ScalarField<T>,
}

/// Kernel geometry plus scratch buffers reused across renders.
#[derive(Clone, Debug)]
pub struct PsfWorkspace<T> {
    kernel_size: usize,
    offsets: Vec<(isize, isize)>,
    parallel: bool,
    flip_xi: bool,
    /// Per source pixel: `exp(-2 a² / C²)` for `a` in `0..=half`, one
    /// plane per `a`, and the Gaussian normaliser.
    axes: Vec<T>,
    norms: Vec<T>,
    denom: Vec<T>,
    scaled_grad: Vec<T>,
    grad_dot_j: Vec<T>,
}

impl<T: Real> PsfWorkspace<T> {
    pub fn new(kernel_size: usize) -> Result<Self> {
        if kernel_size < 3 || kernel_size % 2 == 0 || kernel_size / 2 > MAX_HALF {
            return Err(Error::InvalidValue(format!(
                "kernel size must be odd and in 3..={}, got {kernel_size}",
                2 * MAX_HALF + 1
            )));
        }
        let half = (kernel_size / 2) as isize;
        let offsets = (-half..=half)
            .flat_map(|v| (-half..=half).map(move |u| (u, v)))
            .collect();
        Ok(PsfWorkspace {
            kernel_size,
            offsets,
            parallel: true,
            flip_xi: false,
            axes: Vec::new(),
            norms: Vec::new(),
            denom: Vec::new(),
            scaled_grad: Vec::new(),
            grad_dot_j: Vec::new(),
        })
    }

    pub fn for_camera(cam: &CameraIntrinsics<T>) -> Self {
        Self::new(cam.kernel_size()).expect("camera kernel size is validated")
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn half(&self) -> usize {
        self.kernel_size / 2
    }

    /// Window offsets `(u, v)` (column, row) in summation order: rows of `v`
    /// from `-m/2` to `m/2`, `u` ascending within a row.
    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    /// Switches the row loops between rayon and a plain sequential loop. Both
    /// produce bit-identical results.
    pub fn set_parallel(&mut self, parallel: bool) {
        self.parallel = parallel;
    }

    /// Negative control for the gradient checker: flips the sign of `xi` in
    /// the optimised backward pass.
    #[doc(hidden)]
    pub fn corrupt_xi_sign(&mut self, flip: bool) {
        self.flip_xi = flip;
    }

    /// Fills the separable weight factors. The weight source `s` sends to
    /// offset `(u, v)` is `norms[s] * axis(|v|)[s] * axis(|u|)[s]`, equal to
    /// the [`weight_table`] entry.
    fn fill_tables(&mut self, coc: &CocMap<T>) {
        let planes = self.half() + 1;
        let n = coc.values().len();
        let norm_of = |(&c, &state): (&T, &CocState)| {
            if state == CocState::Delta {
                T::one()
            } else {
                T::lit(2.0) / (T::PI() * c * c)
            }
        };
        let axis_of = |a: usize| {
            move |(&c, &state): (&T, &CocState)| {
                if state == CocState::Delta {
                    if a == 0 {
                        T::one()
                    } else {
                        T::zero()
                    }
                } else {
                    (T::lit(-2.0) * T::from_usize_lossy(a * a) / (c * c)).exp()
                }
            }
        };
        // every entry is overwritten below
        self.norms.resize(n, T::zero());
        self.axes.resize(planes * n, T::zero());
        if n == 0 {
            return;
        }
        let pairs = || coc.values().iter().zip(coc.states());
        if self.parallel {
            let values = coc.values().par_iter().zip(coc.states().par_iter());
            self.norms.par_iter_mut().zip(values).for_each(|(o, p)| *o = norm_of(p));
            self.axes.par_chunks_mut(n).enumerate().for_each(|(a, plane)| {
                let f = axis_of(a);
                plane.iter_mut().zip(pairs()).for_each(|(o, p)| *o = f(p));
            });
        } else {
            self.norms.iter_mut().zip(pairs()).for_each(|(o, p)| *o = norm_of(p));
            for (a, plane) in self.axes.chunks_mut(n).enumerate() {
                let f = axis_of(a);
                plane.iter_mut().zip(pairs()).for_each(|(o, p)| *o = f(p));
            }
        }
    }

    fn weights(&self) -> Weights<'_, T> {
        Weights {
            norms: &self.norms,
            axes: &self.axes,
        }
    }
}

#[derive(Clone, Copy)]
struct Weights<'a, T> {
    norms: &'a [T],
    axes: &'a [T],
}

impl<T: Real> Weights<'_, T> {
    fn axis(&self, a: usize) -> &[T] {
        let n = self.norms.len();
        &self.axes[a * n..(a + 1) * n]
    }

    /// `norm * axis(a)` over `range`, written to `out`.
    fn scaled_axis(&self, a: usize, range: std::ops::Range<usize>, out: &mut [T]) {
        let axis = &self.axis(a)[range.clone()];
        for ((o, &m), &x) in out.iter_mut().zip(&self.norms[range]).zip(axis) {
            *o = m * x;
        }
    }
}

/// Fills the `(half+1)²` quadrant of weights a source with diameter `c`
/// spreads to offset `(|u|, |v|)`, at index `|v| * (half + 1) + |u|`.
pub(crate) fn weight_table<T: Real>(c: T, state: CocState, half: usize, table: &mut [T]) {
    if state == CocState::Delta {
        table.iter_mut().for_each(|t| *t = T::zero());
        table[0] = T::one();
        return;
    }
    let c2 = c * c;
    let norm = T::lit(2.0) / (T::PI() * c2);
    let mut axis = [T::zero(); MAX_HALF + 1];
    for (k, a) in axis[..=half].iter_mut().enumerate() {
        let k2 = T::from_usize_lossy(k * k);
        *a = (T::lit(-2.0) * k2 / c2).exp();
    }
    for av in 0..=half {
        for au in 0..=half {
            table[av * (half + 1) + au] = norm * axis[av] * axis[au];
        }
    }
}

fn check_shapes<T: Real>(img: &Image<T>, coc: &CocMap<T>) -> Result<()> {
    img.ensure_plane(coc.height(), coc.width(), "image vs CoC map")
}

/// Runs `row_fn(y, row)` over every row of `out` (row length `row_len`).
fn for_rows<T: Real, F>(out: &mut [T], row_len: usize, parallel: bool, row_fn: F)
where
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if parallel {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| row_fn(y, row));
    } else {
        out.chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| row_fn(y, row));
    }
}

/// Output columns `x` whose source column `x - u` lies inside `0..w`.
#[inline]
fn tap_columns(u: isize, w: usize) -> std::ops::Range<usize> {
    let lo = u.max(0) as usize;
    let hi = (w as isize + u).clamp(0, w as isize) as usize;
    lo.min(hi)..hi
}

/// Adds every tap landing on output row `y` into `den` (and, when given,
/// the weighted samples into `num`). Per pixel the taps are summed in
/// `(v, u)` row-major order.
fn gather_row<T: Real>(
    y: usize,
    (h, w, ch): (usize, usize, usize),
    half: usize,
    weights: Weights<'_, T>,
    src: Option<&[T]>,
    num: &mut [T],
    den: &mut [T],
) {
    let r = half as isize;
    let mut nv = vec![T::zero(); w];
    for v in -r..=r {
        let sy = y as isize - v;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let sy = sy as usize;
        weights.scaled_axis(v.unsigned_abs(), sy * w..(sy + 1) * w, &mut nv);
        for u in -r..=r {
            let cols = tap_columns(u, w);
            if cols.is_empty() {
                continue;
            }
            let sx0 = (cols.start as isize - u) as usize;
            let nv = &nv[sx0..sx0 + cols.len()];
            let au = &weights.axis(u.unsigned_abs())[sy * w + sx0..sy * w + sx0 + cols.len()];
            match src {
                None => {
                    for ((d, &a), &b) in den[cols].iter_mut().zip(nv).zip(au) {
                        *d = *d + a * b;
                    }
                }
                Some(src) if ch == 3 => {
                    let s0 = sy * w + sx0;
                    let samples = src[s0 * 3..(s0 + cols.len()) * 3].chunks_exact(3);
                    let outs = num[cols.start * 3..cols.end * 3].chunks_exact_mut(3);
                    for ((((d, &a), &b), o), i) in den[cols].iter_mut().zip(nv).zip(au).zip(outs).zip(samples) {
                        let wt = a * b;
                        *d = *d + wt;
                        o[0] = o[0] + i[0] * wt;
                        o[1] = o[1] + i[1] * wt;
                        o[2] = o[2] + i[2] * wt;
                    }
                }
                Some(src) => {
                    let s0 = sy * w + sx0;
                    let samples = src[s0 * ch..(s0 + cols.len()) * ch].chunks_exact(ch);
                    let outs = num[cols.start * ch..cols.end * ch].chunks_exact_mut(ch);
                    for ((((d, &a), &b), o), i) in den[cols].iter_mut().zip(nv).zip(au).zip(outs).zip(samples) {
                        let wt = a * b;
                        *d = *d + wt;
                        for c in 0..ch {
                            o[c] = o[c] + i[c] * wt;
                        }
                    }
                }
            }
        }
    }
}

/// Renders the focused image for a CoC map.
pub fn render_focused<T: Real>(img: &Image<T>, coc: &CocMap<T>, ws: &mut PsfWorkspace<T>) -> Result<Image<T>> {
    check_shapes(img, coc)?;
    ws.fill_tables(coc);
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let half = ws.half();
    let mut out = vec![T::zero(); h * w * ch];
    let (weights, src) = (ws.weights(), img.data());
    for_rows(&mut out, w * ch, ws.parallel, |y, row| {
        let mut den = vec![T::zero(); w];
        gather_row(y, (h, w, ch), half, weights, Some(src), row, &mut den);
        for (px, &d) in row.chunks_exact_mut(ch).zip(&den) {
            for c in px {
                *c = *c / d;
            }
        }
    });
    Image::new(h, w, ch, out)
}

/// Straightforward quadruple loop over outputs and offsets, evaluating every
/// weight from scratch. Used as the oracle for [`render_focused`].
pub fn render_focused_reference<T: Real>(
    img: &Image<T>,
    coc: &CocMap<T>,
    ws: &PsfWorkspace<T>,
) -> Result<Image<T>> {
    check_shapes(img, coc)?;
    let (h, w, ch) = (img.height() as isize, img.width() as isize, img.channels());
    let half = ws.half() as isize;
    let mut out = Vec::with_capacity(img.data().len());
    for y in 0..h {
        for x in 0..w {
            let mut num = vec![T::zero(); ch];
            let mut den = T::zero();
            for v in -half..=half {
                for u in -half..=half {
                    let (sy, sx) = (y - v, x - u);
                    if sy < 0 || sx < 0 || sy >= h || sx >= w {
                        continue;
                    }
                    let (sy, sx) = (sy as usize, sx as usize);
                    let weight = match coc.state(sy, sx) {
                        CocState::Delta if u == 0 && v == 0 => T::one(),
                        CocState::Delta => T::zero(),
                        _ => gaussian_weight(u, v, coc.at(sy, sx)),
                    };
                    den = den + weight;
                    for (c, n) in num.iter_mut().enumerate() {
                        *n = *n + img.at(sy, sx, c) * weight;
                    }
                }
            }
            out.extend(num.into_iter().map(|n| n / den));
        }
    }
    Image::new(img.height(), img.width(), ch, out)
}

fn check_backward_shapes<T: Real>(d_loss_d_j: &Image<T>, img: &Image<T>, coc: &CocMap<T>, j: &Image<T>) -> Result<()> {
    check_shapes(img, coc)?;
    img.ensure_same_shape(d_loss_d_j, "image vs loss gradient")?;
    img.ensure_same_shape(j, "image vs rendered image")
}

/// Gradients of a loss with respect to the all-in-focus image and the CoC
/// map, given `dL/dJ` and the forward output `j`.
///
/// `j` must be the output of [`render_focused`] for the same `img` and
/// `coc`; this is not checked.
pub fn backward<T: Real>(
    d_loss_d_j: &Image<T>,
    img: &Image<T>,
    coc: &CocMap<T>,
    j: &Image<T>,
    ws: &mut PsfWorkspace<T>,
) -> Result<GradientPair<T>> {
    check_backward_shapes(d_loss_d_j, img, coc, j)?;
    ws.fill_tables(coc);
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let half = ws.half();
    let parallel = ws.parallel;

    // Denominators, then dL/dJ / D and sum_c (dL/dJ / D) J per output pixel.
    ws.denom.clear();
    ws.denom.resize(h * w, T::zero());
    {
        let weights = Weights {
            norms: &ws.norms,
            axes: &ws.axes,
        };
        for_rows(&mut ws.denom, w, parallel, |y, row| {
            gather_row(y, (h, w, ch), half, weights, None, &mut [], row);
        });
    }
    ws.scaled_grad.clear();
    ws.scaled_grad.extend(
        d_loss_d_j
            .data()
            .iter()
            .enumerate()
            .map(|(i, &g)| g / ws.denom[i / ch]),
    );
    ws.grad_dot_j.clear();
    ws.grad_dot_j.extend(
        ws.scaled_grad
            .chunks_exact(ch)
            .zip(j.data().chunks_exact(ch))
            .map(|(a, jp)| a.iter().zip(jp).fold(T::zero(), |acc, (&a, &jv)| acc + a * jv)),
    );

    let mut d_image = vec![T::zero(); h * w * ch];
    let mut d_coc = vec![T::zero(); h * w];
    let sign = if ws.flip_xi { -T::one() } else { T::one() };
    let (weights, scaled, dot, src) = (ws.weights(), &ws.scaled_grad, &ws.grad_dot_j, img.data());
    let r = half as isize;
    // Source-centric: each source row pushes to the output rows its kernels
    // reach. Per source the taps are summed in (v, u) row-major order.
    let row_fn = |y: usize, img_row: &mut [T], coc_row: &mut [T]| {
        let row = y * w..(y + 1) * w;
        let states = &coc.states()[row.clone()];
        let s_row = &src[y * w * ch..(y + 1) * w * ch];
        // xi = (4 r² - 2 C²) / C³, split so the taps avoid a division
        let two_c2: Vec<T> = coc.values()[row.clone()].iter().map(|&c| T::lit(2.0) * c * c).collect();
        let inv_c3: Vec<T> = coc.values()[row.clone()].iter().map(|&c| sign / (c * c * c)).collect();
        let mut nv = vec![T::zero(); w];
        for v in -r..=r {
            let oy = y as isize + v;
            if oy < 0 || oy >= h as isize {
                continue;
            }
            let oy = oy as usize;
            let a_row = &scaled[oy * w * ch..(oy + 1) * w * ch];
            let d_row = &dot[oy * w..(oy + 1) * w];
            weights.scaled_axis(v.unsigned_abs(), row.clone(), &mut nv);
            for u in -r..=r {
                let au = &weights.axis(u.unsigned_abs())[row.clone()];
                let four_r2 = T::lit(4.0) * T::from_isize(u * u + v * v).unwrap();
                // sources x whose output x + u is inside the row
                for x in tap_columns(-u, w) {
                    let q = (x as isize + u) as usize;
                    let wt = nv[x] * au[x];
                    let a = &a_row[q * ch..(q + 1) * ch];
                    let ip = &s_row[x * ch..(x + 1) * ch];
                    let gi = &mut img_row[x * ch..(x + 1) * ch];
                    let mut i_dot_a = T::zero();
                    for c in 0..ch {
                        gi[c] = gi[c] + wt * a[c];
                        i_dot_a = i_dot_a + ip[c] * a[c];
                    }
                    if states[x] != CocState::Delta {
                        let xi = (four_r2 - two_c2[x]) * inv_c3[x];
                        coc_row[x] = coc_row[x] + xi * wt * (i_dot_a - d_row[q]);
                    }
                }
            }
        }
    };
    if parallel {
        d_image
            .par_chunks_mut(w * ch)
            .zip(d_coc.par_chunks_mut(w))
            .enumerate()
            .for_each(|(y, (ir, cr))| row_fn(y, ir, cr));
    } else {
        d_image
            .chunks_mut(w * ch)
            .zip(d_coc.chunks_mut(w))
            .enumerate()
            .for_each(|(y, (ir, cr))| row_fn(y, ir, cr));
    }
    Ok(GradientPair {
        d_image: Image::new(h, w, ch, d_image)?,
        d_coc: ScalarField::new(h, w, d_coc)?,
    })
}

/// Scatter-form backward pass: loops over outputs and pushes each output's
/// gradient back to its sources, re-evaluating every weight. Oracle for
/// [`backward`].
pub fn backward_reference<T: Real>(
    d_loss_d_j: &Image<T>,
    img: &Image<T>,
    coc: &CocMap<T>,
    j: &Image<T>,
    ws: &PsfWorkspace<T>,
) -> Result<GradientPair<T>> {
    check_backward_shapes(d_loss_d_j, img, coc, j)?;
    let (h, w, ch) = (img.height() as isize, img.width() as isize, img.channels());
    let half = ws.half() as isize;
    let weight = |sy: usize, sx: usize, u: isize, v: isize| match coc.state(sy, sx) {
        CocState::Delta if u == 0 && v == 0 => T::one(),
        CocState::Delta => T::zero(),
        _ => gaussian_weight(u, v, coc.at(sy, sx)),
    };
    let mut d_image = vec![T::zero(); img.data().len()];
    let mut d_coc = vec![T::zero(); (h * w) as usize];
    for s in 0..h {
        for t in 0..w {
            let mut den = T::zero();
            for v in -half..=half {
                for u in -half..=half {
                    let (sy, sx) = (s - v, t - u);
                    if sy >= 0 && sx >= 0 && sy < h && sx < w {
                        den = den + weight(sy as usize, sx as usize, u, v);
                    }
                }
            }
            for v in -half..=half {
                for u in -half..=half {
                    let (sy, sx) = (s - v, t - u);
                    if sy < 0 || sx < 0 || sy >= h || sx >= w {
                        continue;
                    }
                    let (sy, sx) = (sy as usize, sx as usize);
                    let wt = weight(sy, sx, u, v);
                    let p = sy * w as usize + sx;
                    for c in 0..ch {
                        let g = d_loss_d_j.at(s as usize, t as usize, c);
                        d_image[p * ch + c] = d_image[p * ch + c] + g * wt / den;
                        if coc.state(sy, sx) != CocState::Delta {
                            let cc = coc.at(sy, sx);
                            let r2 = T::from_isize(u * u + v * v).unwrap();
                            let diff = img.at(sy, sx, c) - j.at(s as usize, t as usize, c);
                            d_coc[p] = d_coc[p] + g * xi(r2, cc) * diff * wt / den;
                        }
                    }
                }
            }
        }
    }
    Ok(GradientPair {
        d_image: Image::new(img.height(), img.width(), ch, d_image)?,
        d_coc: ScalarField::new(img.height(), img.width(), d_coc)?,
    })
}

/// Chains a CoC gradient to depth: `dL/dd = dL/dC * dC/dd` per pixel, zero
/// wherever a clamp is active.
pub fn backward_to_depth<T: Real>(
    grad: &GradientPair<T>,
    cam: &CameraIntrinsics<T>,
    depth: &DepthMap<T>,
) -> Result<ScalarField<T>> {
    if grad.d_coc.height() != depth.height() || grad.d_coc.width() != depth.width() {
        return Err(Error::ShapeMismatch(format!(
            "CoC gradient is {}x{}, depth is {}x{}",
            grad.d_coc.height(),
            grad.d_coc.width(),
            depth.height(),
            depth.width()
        )));
    }
    let data = grad
        .d_coc
        .data()
        .iter()
        .zip(depth.data())
        .map(|(&g, &d)| Ok(g * cam.d_coc_d_depth(d)?))
        .collect::<Result<Vec<T>>>()?;
    ScalarField::new(depth.height(), depth.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> Image<f64> {
        Image::from_fn(h, w, ch, |_, _, _| rng.gen()).unwrap()
    }

    fn random_coc(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> CocMap<f64> {
        CocMap::from_values(h, w, (0..h * w).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn weight_examples() {
        assert!((gaussian_weight(0, 0, 2.0f64) - 2.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-15);
        assert!((gaussian_weight(0, 0, 2.0f64) - 0.159155).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (u, v) = (rng.gen_range(-5..=5), rng.gen_range(-5..=5));
            let c: f64 = rng.gen_range(1.0..8.0);
            assert_eq!(gaussian_weight(u, v, c), gaussian_weight(-u, -v, c));
            // radius form with r = c / 2
            let r = c / 2.0;
            let radius_form = 1.0 / (2.0 * std::f64::consts::PI * r * r)
                * (-((u * u + v * v) as f64) / (2.0 * r * r)).exp();
            assert!((radius_form - gaussian_weight(u, v, c)).abs() <= 1e-15 * radius_form.max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn workspace_offsets_are_symmetric() {
        let ws = PsfWorkspace::<f64>::new(7).unwrap();
        assert_eq!(ws.offsets().len(), 49);
        for &(u, v) in ws.offsets() {
            assert!(ws.offsets().contains(&(-u, -v)));
        }
        assert_eq!(ws.offsets()[0], (-3, -3));
        assert_eq!(ws.offsets()[1], (-2, -3));
        assert!(PsfWorkspace::<f64>::new(4).is_err());
    }

    #[test]
    fn delta_map_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 9, 11, 3);
        let coc = random_coc(&mut rng, 9, 11, 0.0, 0.99);
        let mut ws = PsfWorkspace::new(7).unwrap();
        let out = render_focused(&img, &coc, &mut ws).unwrap();
        assert!(max_abs_diff(out.data(), img.data()) <= 1e-12);
    }

    #[test]
    fn flat_field_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::filled(10, 13, 3, 0.37).unwrap();
        let coc = random_coc(&mut rng, 10, 13, 0.0, 6.0);
        let mut ws = PsfWorkspace::new(7).unwrap();
        let out = render_focused(&img, &coc, &mut ws).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() <= 1e-12));
    }

    #[test]
    fn optimized_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 9, 9, 1);
        let coc = random_coc(&mut rng, 9, 9, 1.0, 6.0);
        let mut ws = PsfWorkspace::new(7).unwrap();
        let fast = render_focused(&img, &coc, &mut ws).unwrap();
        let slow = render_focused_reference(&img, &coc, &ws).unwrap();
        assert!(max_abs_diff(fast.data(), slow.data()) <= 1e-12);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 23, 17, 3);
        let coc = random_coc(&mut rng, 23, 17, 0.5, 6.0);
        let g = random_image(&mut rng, 23, 17, 3);
        let mut ws = PsfWorkspace::new(7).unwrap();
        let j = render_focused(&img, &coc, &mut ws).unwrap();
        let bp = backward(&g, &img, &coc, &j, &mut ws).unwrap();
        ws.set_parallel(false);
        assert_eq!(render_focused(&img, &coc, &mut ws).unwrap(), j);
        assert_eq!(backward(&g, &img, &coc, &j, &mut ws).unwrap(), bp);
    }

    #[test]
    fn constant_image_has_no_coc_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Image::filled(8, 8, 3, 0.6).unwrap();
        let coc = random_coc(&mut rng, 8, 8, 1.0, 6.0);
        let g = random_image(&mut rng, 8, 8, 3);
        let mut ws = PsfWorkspace::new(7).unwrap();
        let j = render_focused(&img, &coc, &mut ws).unwrap();
        let bp = backward(&g, &img, &coc, &j, &mut ws).unwrap();
        assert!(bp.d_coc.data().iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 8, 8, 1);
        let coc = random_coc(&mut rng, 8, 8, 1.0, 6.0);
        let g = Image::filled(8, 8, 1, 0.0).unwrap();
        let mut ws = PsfWorkspace::new(7).unwrap();
        let j = render_focused(&img, &coc, &mut ws).unwrap();
        let bp = backward(&g, &img, &coc, &j, &mut ws).unwrap();
        assert!(bp.d_image.data().iter().chain(bp.d_coc.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn delta_pixels_get_identity_image_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(&mut rng, 6, 6, 1);
        let coc = CocMap::from_values(6, 6, vec![0.5; 36]).unwrap();
        let g = random_image(&mut rng, 6, 6, 1);
        let mut ws = PsfWorkspace::new(5).unwrap();
        let j = render_focused(&img, &coc, &mut ws).unwrap();
        let bp = backward(&g, &img, &coc, &j, &mut ws).unwrap();
        assert!(max_abs_diff(bp.d_image.data(), g.data()) <= 1e-15);
        assert!(bp.d_coc.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let img = Image::filled(4, 4, 1, 0.5).unwrap();
        let coc = CocMap::from_values(4, 5, vec![2.0; 20]).unwrap();
        let mut ws = PsfWorkspace::new(3).unwrap();
        assert!(render_focused(&img, &coc, &mut ws).is_err());
        assert!(render_focused_reference(&img, &coc, &ws).is_err());
    }

    #[test]
    fn single_precision_renders() {
        let img = Image::<f32>::from_fn(8, 8, 1, |y, x, _| ((y + x) % 3) as f32 / 2.0).unwrap();
        let coc = CocMap::from_values(8, 8, vec![3.0f32; 64]).unwrap();
        let mut ws = PsfWorkspace::new(7).unwrap();
        let fast = render_focused(&img, &coc, &mut ws).unwrap();
        let slow = render_focused_reference(&img, &coc, &ws).unwrap();
        assert!(fast.data().iter().zip(slow.data()).all(|(a, b)| (a - b).abs() < 1e-5));
    }
}
