//! Depth recovery from a focal stack by direct per-pixel optimisation through
//! the PSF layer.
//!
//! Depth is parameterised as `d = d_min + (d_max - d_min) * sigmoid(z)` so
//! every iterate stays inside the bounds. Each iteration renders every slice
//! from the current depth, scores it against the captured slice, and pulls
//! the gradient back to `z` through the PSF backward pass and the thin-lens
//! derivative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{DepthMap, FocalStack, FocusSlice, Image, ScalarField};
use crate::losses::{l_rec, l_sharp, l_smooth, LossReport, LossWeights};
use crate::optics::CameraIntrinsics;
use crate::psf::{backward, backward_to_depth, render_focused, weight_table, PsfWorkspace};
use crate::scalar::Real;

/// Order in which focus distances are added, as fractions of the scene's
/// maximum depth.
pub const FOCAL_SEQUENCE: [f64; 10] = [0.2, 0.8, 0.1, 0.9, 0.3, 0.7, 0.4, 0.6, 0.5, 0.35];

/// Local 7×7 intensity variance below which a pixel counts as textureless.
pub const TEXTURE_THRESHOLD: f64 = 1e-4;
const CONFIDENCE_WINDOW: usize = 7;
const GRID_WINDOW: usize = 7;
const CONVERGENCE_WINDOW: usize = 20;
const CONVERGENCE_TOL: f64 = 1e-6;
/// Step halvings allowed on loss plateaus before the solve is declared
/// converged.
const MAX_DECAYS: usize = 8;

/// The first `n` focus distances of the sequence for a scene of the given
/// depth.
pub fn focal_sequence<T: Real>(n: usize, max_depth_m: T) -> Result<Vec<T>> {
    if !(1..=FOCAL_SEQUENCE.len()).contains(&n) {
        return Err(Error::InvalidValue(format!("stack size must be in 1..=10, got {n}")));
    }
    Ok(FOCAL_SEQUENCE[..n].iter().map(|&f| T::lit(f) * max_depth_m).collect())
}

/// Renders one focused slice per focus distance from a known depth map.
pub fn render_stack<T: Real>(
    img: &Image<T>,
    depth: &DepthMap<T>,
    cam: &CameraIntrinsics<T>,
    focus_distances: &[T],
    max_depth_m: T,
) -> Result<FocalStack<T>> {
    img.ensure_plane(depth.height(), depth.width(), "render_stack")?;
    let mut ws = PsfWorkspace::for_camera(cam);
    let slices = focus_distances
        .iter()
        .map(|&f| {
            let cam = cam.with_focus(f)?;
            Ok(FocusSlice {
                image: render_focused(img, &cam.coc_map(depth), &mut ws)?,
                focus_distance_m: f,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FocalStack::new(img.clone(), slices, *cam, max_depth_m, Some(depth.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    /// Gradient descent; a step that increases the loss is retried at half
    /// the size.
    Descent,
    /// Heavy-ball momentum with coefficient 0.9.
    Momentum,
    /// Adaptive moments (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init<T> {
    MidDepth,
    GridSearch { levels: usize },
    Given(DepthMap<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig<T> {
    pub iterations: usize,
    pub step_size: T,
    pub optimizer: Optimizer,
    pub depth_bounds: (T, T),
    pub init: Init<T>,
    pub weights: LossWeights<T>,
    pub seed: u64,
    /// Amplitude of the seeded uniform perturbation added to the initial
    /// latent field.
    pub init_jitter: T,
}

impl<T: Real> SolverConfig<T> {
    /// Defaults for a stack: bounds `[0.1, 1] * max_depth`, 500 Adam steps of
    /// 0.05, grid-search init over 64 levels.
    pub fn for_stack(stack: &FocalStack<T>) -> Self {
        let max = stack.max_depth_m();
        SolverConfig {
            iterations: 500,
            step_size: T::lit(0.05),
            optimizer: Optimizer::Adam,
            depth_bounds: (T::lit(0.1) * max, max),
            init: Init::GridSearch { levels: 64 },
            weights: LossWeights::default(),
            seed: 0,
            init_jitter: T::lit(1e-3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.depth_bounds;
        if !(lo > T::zero() && lo < hi && hi.is_finite()) {
            return Err(Error::InvalidValue(format!("depth bounds must satisfy 0 < min < max, got ({lo}, {hi})")));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidValue("iterations must be at least 1".into()));
        }
        if !(self.step_size > T::zero() && self.step_size.is_finite()) {
            return Err(Error::InvalidValue(format!("step size must be positive, got {}", self.step_size)));
        }
        if let Init::GridSearch { levels } = self.init {
            if levels < 2 {
                return Err(Error::InvalidValue("grid search needs at least 2 levels".into()));
            }
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult<T> {
    /// Lowest-loss iterate.
    pub depth: DepthMap<T>,
    pub loss_history: Vec<LossReport<T>>,
    pub converged: bool,
    /// Local 7×7 variance of the all-in-focus luminance.
    pub confidence: ScalarField<T>,
}

/// Mean over the in-bounds part of a square window, per pixel.
fn window_mean<T: Real>(x: &[T], h: usize, w: usize, size: usize) -> Vec<T> {
    let half = (size / 2) as isize;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let mut sum = T::zero();
            let mut n = 0usize;
            for yy in (y - half).max(0)..=(y + half).min(h as isize - 1) {
                for xc in (xx - half).max(0)..=(xx + half).min(w as isize - 1) {
                    sum = sum + x[yy as usize * w + xc as usize];
                    n += 1;
                }
            }
            out.push(sum / T::from_usize_lossy(n));
        }
    }
    out
}

/// Minimum over the in-bounds part of a square window, per pixel, taken only
/// over positions where `keep` is set. Pixels with no such neighbour keep
/// their own value.
fn window_min<T: Real>(x: &[T], keep: &[bool], h: usize, w: usize, size: usize) -> Vec<T> {
    let half = (size / 2) as isize;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let mut m = T::infinity();
            for yy in (y - half).max(0)..=(y + half).min(h as isize - 1) {
                for xc in (xx - half).max(0)..=(xx + half).min(w as isize - 1) {
                    let q = yy as usize * w + xc as usize;
                    if keep[q] {
                        m = m.min(x[q]);
                    }
                }
            }
            out.push(if m.is_finite() { m } else { x[y as usize * w + xx as usize] });
        }
    }
    out
}

/// Per-pixel texture confidence: variance of the luminance in a 7×7 window.
pub fn texture_confidence<T: Real>(img: &Image<T>) -> ScalarField<T> {
    let (h, w) = (img.height(), img.width());
    let lum = img.luminance();
    let sq: Vec<T> = lum.iter().map(|&v| v * v).collect();
    let m = window_mean(&lum, h, w, CONFIDENCE_WINDOW);
    let m2 = window_mean(&sq, h, w, CONFIDENCE_WINDOW);
    let var = m.iter().zip(&m2).map(|(&a, &b)| (b - a * a).max(T::zero())).collect();
    ScalarField::new(h, w, var).expect("variance of finite data is finite")
}

/// Pixels whose texture confidence exceeds [`TEXTURE_THRESHOLD`].
pub fn texture_mask<T: Real>(img: &Image<T>) -> Vec<bool> {
    texture_confidence(img)
        .data()
        .iter()
        .map(|&v| v > T::lit(TEXTURE_THRESHOLD))
        .collect()
}

/// `levels` depths evenly spaced over `[d_min, d_max]`.
pub fn candidate_depths<T: Real>(bounds: (T, T), levels: usize) -> Vec<T> {
    let (lo, hi) = bounds;
    let span = T::from_usize_lossy(levels.max(2) - 1);
    (0..levels.max(2))
        .map(|k| lo + (hi - lo) * T::from_usize_lossy(k) / span)
        .collect()
}

/// Forward-only initialisation: for each candidate depth, render every slice
/// as if the whole scene sat at that depth and pick, per pixel, the candidate
/// with the lowest windowed absolute error. The window is the best of all 7×7
/// windows containing the pixel, so windows straddling a depth edge lose to
/// ones lying on one side of it. Pixels near depth jumps are then re-decided
/// against the full forward model. Textureless pixels get the middle of the
/// bounds.
pub fn grid_init<T: Real>(stack: &FocalStack<T>, bounds: (T, T), levels: usize) -> Result<DepthMap<T>> {
    grid_init_smoothed(stack, bounds, levels, LossWeights::default().lambda_smooth)
}

/// [`grid_init`] with an explicit weight for the edge-aware smoothness term
/// used when re-deciding pixels near depth jumps.
pub fn grid_init_smoothed<T: Real>(
    stack: &FocalStack<T>,
    bounds: (T, T),
    levels: usize,
    lambda_smooth: T,
) -> Result<DepthMap<T>> {
    if levels < 2 {
        return Err(Error::InvalidValue("grid search needs at least 2 levels".into()));
    }
    let img = stack.all_in_focus();
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mid = (bounds.0 + bounds.1) * T::lit(0.5);
    let mask = texture_mask(img);
    let mut best = vec![(T::infinity(), mid); h * w];
    let mut ws = PsfWorkspace::for_camera(stack.camera());
    for d in candidate_depths(bounds, levels) {
        let flat = DepthMap::constant(h, w, d)?;
        let mut err = vec![T::zero(); h * w];
        for k in 0..stack.len() {
            let cam = stack.camera_for(k);
            let rendered = render_focused(img, &cam.coc_map(&flat), &mut ws)?;
            let target = &stack.slices()[k].image;
            for (p, e) in err.iter_mut().enumerate() {
                for c in 0..ch {
                    let i = p * ch + c;
                    *e = *e + (rendered.data()[i] - target.data()[i]).abs();
                }
            }
        }
        let err = window_min(&window_mean(&err, h, w, GRID_WINDOW), &mask, h, w, GRID_WINDOW);
        for (b, e) in best.iter_mut().zip(err) {
            if e < b.0 {
                *b = (e, d);
            }
        }
    }
    let mut data: Vec<T> = best
        .into_iter()
        .zip(&mask)
        .map(|((_, d), &textured)| if textured { d } else { mid })
        .collect();
    let candidates = candidate_depths(bounds, levels);
    let spacing = candidates[1] - candidates[0];
    let min_jump = (spacing * T::lit(3.0)).min(bounds.1 - bounds.0);
    refine_boundaries(stack, &mut data, &mask, min_jump, lambda_smooth)?;
    DepthMap::new(h, w, data)
}

/// Re-decides textured pixels next to a depth jump. The constant-depth
/// hypotheses of the grid pass are wrong near an edge, and independent
/// per-pixel choices scatter between depths that fit equally well, so each
/// such pixel tries the smallest and largest depth around it, each
/// 4-neighbour's depth, and swapping depths with each 4-neighbour, with every
/// other pixel held fixed. A move is scored by the slice- and channel-averaged
/// absolute error on the outputs it can reach plus the edge-aware smoothness
/// of the depth differences it touches, and kept only if it lowers the score.
fn refine_boundaries<T: Real>(
    stack: &FocalStack<T>,
    depth: &mut [T],
    mask: &[bool],
    min_jump: T,
    lambda_smooth: T,
) -> Result<()> {
    let img = stack.all_in_focus();
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let n = h * w;
    let half = stack.camera().kernel_size() / 2;
    let stride = (half + 1) * (half + 1);
    let cams: Vec<_> = (0..stack.len()).map(|s| stack.camera_for(s)).collect();
    let window = |y: usize, x: usize, r: usize| {
        (y.saturating_sub(r)..(y + r + 1).min(h))
            .flat_map(move |yy| (x.saturating_sub(r)..(x + r + 1).min(w)).map(move |xx| yy * w + xx))
    };
    let offset = |o: usize, q: usize| (o / w).abs_diff(q / w) * (half + 1) + (o % w).abs_diff(q % w);
    let table_for = |cam: &CameraIntrinsics<T>, d: T| -> Result<Vec<T>> {
        let (c, state) = cam.coc_state(d)?;
        let mut t = vec![T::zero(); stride];
        weight_table(c, state, half, &mut t);
        Ok(t)
    };

    // per slice: source tables, and the unnormalised render sums
    let mut tables = vec![T::zero(); cams.len() * n * stride];
    let mut num = vec![T::zero(); cams.len() * n * ch];
    let mut den = vec![T::zero(); cams.len() * n];
    for (s, cam) in cams.iter().enumerate() {
        for q in 0..n {
            let t = table_for(cam, depth[q])?;
            for o in window(q / w, q % w, half) {
                let wgt = t[offset(o, q)];
                den[s * n + o] = den[s * n + o] + wgt;
                for c in 0..ch {
                    num[(s * n + o) * ch + c] = num[(s * n + o) * ch + c] + wgt * img.data()[q * ch + c];
                }
            }
            tables[(s * n + q) * stride..(s * n + q + 1) * stride].copy_from_slice(&t);
        }
    }

    // exp(-|luminance step|) to the right (slot 0) and below (slot 1)
    let lum = img.luminance();
    let mut edge_weight = vec![T::zero(); 2 * n];
    for q in 0..n {
        if q % w + 1 < w {
            edge_weight[2 * q] = (-(lum[q + 1] - lum[q]).abs()).exp();
        }
        if q / w + 1 < h {
            edge_weight[2 * q + 1] = (-(lum[q + w] - lum[q]).abs()).exp();
        }
    }

    let mut dirty = vec![true; n];
    for _pass in 0..8 {
        let mut changed = false;
        let mut next_dirty = vec![false; n];
        for p in 0..n {
            if !mask[p] || !dirty[p] {
                continue;
            }
            let (y, x) = (p / w, p % w);
            let (lo, hi) = window(y, x, half).fold((T::infinity(), T::neg_infinity()), |(lo, hi), q| {
                (lo.min(depth[q]), hi.max(depth[q]))
            });
            if hi - lo < min_jump {
                continue;
            }
            let mut moves: Vec<Vec<(usize, T)>> = vec![vec![(p, lo)], vec![(p, hi)]];
            let neighbours = [
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
            ];
            for q in neighbours.into_iter().flatten() {
                moves.push(vec![(p, depth[q])]);
                moves.push(vec![(p, depth[q]), (q, depth[p])]);
            }
            moves.retain(|m| m.iter().any(|&(i, v)| depth[i] != v));
            if moves.is_empty() {
                continue;
            }
            // outputs any move can reach
            let reach: Vec<usize> = window(y, x, half + 1).collect();
            let score = |deltas: &[(usize, Vec<T>)], s: usize| -> T {
                let target = stack.slices()[s].image.data();
                let mut err = T::zero();
                for &o in &reach {
                    let mut d = den[s * n + o];
                    let mut acc = [T::zero(); 3];
                    for c in 0..ch {
                        acc[c] = num[(s * n + o) * ch + c];
                    }
                    for (q, dt) in deltas {
                        if (o / w).abs_diff(q / w) <= half && (o % w).abs_diff(q % w) <= half {
                            let dw = dt[offset(o, *q)];
                            d = d + dw;
                            for c in 0..ch {
                                acc[c] = acc[c] + dw * img.data()[q * ch + c];
                            }
                        }
                    }
                    for c in 0..ch {
                        err = err + (acc[c] / d - target[o * ch + c]).abs();
                    }
                }
                err
            };
            // weight change each move makes to each changed source, per slice
            let deltas_for = |m: &[(usize, T)], s: usize| -> Result<Vec<(usize, Vec<T>)>> {
                m.iter()
                    .map(|&(q, v)| {
                        let new = table_for(&cams[s], v)?;
                        let old = &tables[(s * n + q) * stride..(s * n + q + 1) * stride];
                        Ok((q, new.iter().zip(old).map(|(&a, &b)| a - b).collect()))
                    })
                    .collect()
            };
            // edges touching p or its 4-neighbours cover every depth
            // difference a move can change
            let mut edges: Vec<(usize, usize)> = Vec::new();
            for c in std::iter::once(p).chain(neighbours.into_iter().flatten()) {
                let (cy, cx) = (c / w, c % w);
                for e in [
                    (cx + 1 < w).then(|| (c, c + 1)),
                    (cy + 1 < h).then(|| (c, c + w)),
                    (cx > 0).then(|| (c - 1, c)),
                    (cy > 0).then(|| (c - w, c)),
                ]
                .into_iter()
                .flatten()
                {
                    if !edges.contains(&e) {
                        edges.push(e);
                    }
                }
            }
            let smooth = |m: &[(usize, T)]| -> T {
                let at = |i: usize| m.iter().find(|(j, _)| *j == i).map_or(depth[i], |&(_, v)| v);
                edges
                    .iter()
                    .map(|&(a, b)| (at(b) - at(a)).abs() * edge_weight[a * 2 + usize::from(b != a + 1)])
                    .sum::<T>()
                    * lambda_smooth
            };
            let data_norm = T::one() / T::from_usize_lossy(cams.len() * ch);
            let base: T = (0..cams.len()).map(|s| score(&[], s)).sum::<T>() * data_norm + smooth(&[]);
            let mut best: Option<(T, usize)> = None;
            for (k, m) in moves.iter().enumerate() {
                let mut err = T::zero();
                for s in 0..cams.len() {
                    err = err + score(&deltas_for(m, s)?, s);
                }
                let err = err * data_norm + smooth(m);
                if err < base && best.map_or(true, |(e, _)| err < e) {
                    best = Some((err, k));
                }
            }
            let Some((_, k)) = best else { continue };
            let applied = (0..cams.len())
                .map(|s| deltas_for(&moves[k], s))
                .collect::<Result<Vec<_>>>()?;
            for (s, deltas) in applied.into_iter().enumerate() {
                for (q, dt) in deltas {
                    for o in window(q / w, q % w, half) {
                        let dw = dt[offset(o, q)];
                        den[s * n + o] = den[s * n + o] + dw;
                        for c in 0..ch {
                            num[(s * n + o) * ch + c] = num[(s * n + o) * ch + c] + dw * img.data()[q * ch + c];
                        }
                    }
                    let slot = &mut tables[(s * n + q) * stride..(s * n + q + 1) * stride];
                    for (t, d) in slot.iter_mut().zip(&dt) {
                        *t = *t + *d;
                    }
                }
            }
            for &(i, v) in &moves[k] {
                depth[i] = v;
                for q in window(i / w, i % w, 2 * half + 2) {
                    next_dirty[q] = true;
                }
            }
            changed = true;
        }
        if !changed {
            break;
        }
        dirty = next_dirty;
    }
    Ok(())
}

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Loss and depth gradient for one depth map against a stack.
pub struct Objective<'a, T> {
    stack: &'a FocalStack<T>,
    weights: LossWeights<T>,
    ws: PsfWorkspace<T>,
}

impl<'a, T: Real> Objective<'a, T> {
    pub fn new(stack: &'a FocalStack<T>, weights: LossWeights<T>) -> Self {
        Objective {
            stack,
            weights,
            ws: PsfWorkspace::for_camera(stack.camera()),
        }
    }

    /// Slice-averaged loss report and `d total / d depth`.
    pub fn evaluate(&mut self, depth: &DepthMap<T>) -> Result<(LossReport<T>, Vec<T>)> {
        let img = self.stack.all_in_focus();
        let n_slices = T::from_usize_lossy(self.stack.len());
        let mut grad = vec![T::zero(); depth.data().len()];
        let (mut rec, mut sharp) = (T::zero(), T::zero());
        for k in 0..self.stack.len() {
            let cam = self.stack.camera_for(k);
            let coc = cam.coc_map(depth);
            let j_hat = render_focused(img, &coc, &mut self.ws)?;
            let target = &self.stack.slices()[k].image;
            let (r, g_rec) = l_rec(&j_hat, target, self.weights.alpha)?;
            let (s, g_sharp) = l_sharp(&j_hat, target)?;
            rec = rec + r;
            sharp = sharp + s;
            let upstream = Image::new(
                j_hat.height(),
                j_hat.width(),
                j_hat.channels(),
                g_rec
                    .data()
                    .iter()
                    .zip(g_sharp.data())
                    .map(|(&a, &b)| self.weights.lambda_rec * a + self.weights.lambda_sharp * b)
                    .collect(),
            )?;
            let pair = backward(&upstream, img, &coc, &j_hat, &mut self.ws)?;
            let gd = backward_to_depth(&pair, &cam, depth)?;
            for (g, &v) in grad.iter_mut().zip(gd.data()) {
                *g = *g + v / n_slices;
            }
        }
        let (smooth, g_smooth) = l_smooth(depth, img)?;
        for (g, &v) in grad.iter_mut().zip(g_smooth.data()) {
            *g = *g + self.weights.lambda_smooth * v;
        }
        let report = LossReport::weighted(rec / n_slices, smooth, sharp / n_slices, &self.weights);
        Ok((report, grad))
    }
}

struct Latent<T> {
    z: Vec<T>,
    lo: T,
    span: T,
    h: usize,
    w: usize,
}

impl<T: Real> Latent<T> {
    fn from_depth(depth: &DepthMap<T>, bounds: (T, T)) -> Self {
        let (lo, hi) = bounds;
        let span = hi - lo;
        let eps = T::lit(1e-6);
        let z = depth
            .data()
            .iter()
            .map(|&d| {
                let f = ((d - lo) / span).max(eps).min(T::one() - eps);
                (f / (T::one() - f)).ln()
            })
            .collect();
        Latent {
            z,
            lo,
            span,
            h: depth.height(),
            w: depth.width(),
        }
    }

    fn depth_of(&self, z: &[T]) -> DepthMap<T> {
        let data = z.iter().map(|&z| self.lo + self.span * sigmoid(z)).collect();
        DepthMap::new(self.h, self.w, data).expect("sigmoid keeps depth inside positive bounds")
    }

    fn depth(&self) -> DepthMap<T> {
        self.depth_of(&self.z)
    }

    /// Converts a depth gradient to a latent gradient in place.
    fn chain(&self, grad: &mut [T]) {
        for (g, &z) in grad.iter_mut().zip(&self.z) {
            let s = sigmoid(z);
            *g = *g * self.span * s * (T::one() - s);
        }
    }
}

fn diverged<T: Real>(iteration: usize, report: &LossReport<T>, last: Option<(&DepthMap<T>, T)>) -> Error {
    Error::Diverged {
        iteration,
        message: format!(
            "non-finite loss (rec={}, smooth={}, sharp={})",
            report.rec, report.smooth, report.sharp
        ),
        last_depth: last
            .map(|(d, _)| d.data().iter().map(|v| v.to_f64_lossy()).collect())
            .unwrap_or_default(),
        last_loss: last.map(|(_, l)| l.to_f64_lossy()),
    }
}

/// Recovers a depth map from a focal stack.
pub fn solve_depth<T: Real>(stack: &FocalStack<T>, config: &SolverConfig<T>) -> Result<SolveResult<T>> {
    config.validate()?;
    if stack.is_empty() {
        return Err(Error::InvalidStack("stack has no focused slices".into()));
    }
    let bounds = config.depth_bounds;
    let (h, w) = (stack.height(), stack.width());
    let init = match &config.init {
        Init::MidDepth => DepthMap::constant(h, w, (bounds.0 + bounds.1) * T::lit(0.5))?,
        Init::GridSearch { levels } => grid_init_smoothed(stack, bounds, *levels, config.weights.lambda_smooth)?,
        Init::Given(d) => {
            if d.height() != h || d.width() != w {
                return Err(Error::ShapeMismatch("initial depth does not match the stack".into()));
            }
            d.clone()
        }
    };
    let mut latent = Latent::from_depth(&init, bounds);
    if config.init_jitter > T::zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for z in latent.z.iter_mut() {
            *z = *z + config.init_jitter * T::lit(rng.gen_range(-1.0..1.0));
        }
    }

    let mut objective = Objective::new(stack, config.weights);
    let mut history: Vec<LossReport<T>> = Vec::with_capacity(config.iterations);
    let mut m = vec![T::zero(); latent.z.len()];
    let mut v = vec![T::zero(); latent.z.len()];
    let (beta1, beta2, adam_eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
    let mut step = config.step_size;
    let mut converged = false;

    let mut depth = latent.depth();
    let (mut report, mut grad) = objective.evaluate(&depth)?;
    if !report.total.is_finite() {
        return Err(diverged(0, &report, None));
    }
    // running minimum of the loss, per iteration, and the iterate that hit it
    let mut best_so_far: Vec<T> = Vec::with_capacity(config.iterations);
    let mut best = (report.total, depth.clone());
    let mut plateau_start = 0;
    let mut decays = 0;
    for it in 0..config.iterations {
        history.push(report);
        if report.total < best.0 {
            best = (report.total, depth.clone());
        }
        best_so_far.push(best.0);
        if best_so_far.len() - plateau_start > CONVERGENCE_WINDOW {
            let past = best_so_far[best_so_far.len() - 1 - CONVERGENCE_WINDOW];
            let decrease = (past - best.0) / past.abs().max(T::min_positive_value());
            if decrease < T::lit(CONVERGENCE_TOL) {
                if decays == MAX_DECAYS || config.optimizer == Optimizer::Descent {
                    converged = true;
                    break;
                }
                step = step * T::lit(0.5);
                decays += 1;
                plateau_start = best_so_far.len() - 1;
            }
        }
        if it + 1 == config.iterations {
            break;
        }
        latent.chain(&mut grad);
        match config.optimizer {
            Optimizer::Adam => {
                let t = (it + 1) as i32;
                let c1 = T::one() - beta1.powi(t);
                let c2 = T::one() - beta2.powi(t);
                for i in 0..latent.z.len() {
                    m[i] = beta1 * m[i] + (T::one() - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (T::one() - beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    latent.z[i] = latent.z[i] - step * m_hat / (v_hat.sqrt() + adam_eps);
                }
            }
            Optimizer::Momentum => {
                for i in 0..latent.z.len() {
                    m[i] = beta1 * m[i] - step * grad[i];
                    latent.z[i] = latent.z[i] + m[i];
                }
            }
            Optimizer::Descent => {
                // backtrack until the loss does not increase
                let mut accepted = None;
                for _ in 0..40 {
                    let trial: Vec<T> = latent.z.iter().zip(&grad).map(|(&z, &g)| z - step * g).collect();
                    let trial_depth = latent.depth_of(&trial);
                    let (r, g) = objective.evaluate(&trial_depth)?;
                    if r.total.is_finite() && r.total <= report.total {
                        accepted = Some((trial, trial_depth, r, g));
                        break;
                    }
                    step = step * T::lit(0.5);
                }
                match accepted {
                    Some((trial, d, r, g)) => {
                        latent.z = trial;
                        depth = d;
                        report = r;
                        grad = g;
                        continue;
                    }
                    None => {
                        converged = true;
                        break;
                    }
                }
            }
        }
        let next_depth = latent.depth();
        let (r, g) = objective.evaluate(&next_depth)?;
        if !r.total.is_finite() {
            return Err(diverged(it + 1, &r, Some((&depth, report.total))));
        }
        depth = next_depth;
        report = r;
        grad = g;
    }
    let _ = depth;
    Ok(SolveResult {
        depth: best.1,
        loss_history: history,
        converged,
        confidence: texture_confidence(stack.all_in_focus()),
    })
}
