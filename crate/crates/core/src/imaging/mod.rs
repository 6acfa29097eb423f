//! Raster types shared by the renderer, the losses and the solver, plus their
//! file formats.
//!
//! Every constructor validates its input, so a value of any of these types is
//! always well-formed: dimensions agree with the buffer length and samples are
//! finite. Stored intensities are used as-is; no gamma transform is applied on
//! load or save.

mod io;
mod manifest;

pub use io::{load_depth, load_image, quantize, save_depth, save_image, save_image_16, BitDepth};
pub use manifest::{
    load_camera_config, load_stack_manifest, save_camera_config, save_stack, Manifest, ManifestBlock,
};

use crate::error::{Error, Result};
use crate::optics::CameraIntrinsics;
use crate::scalar::Real;

fn check_dims(height: usize, width: usize, len: usize, per_pixel: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::ShapeMismatch(format!(
            "dimensions must be positive, got {height}x{width}"
        )));
    }
    if height * width * per_pixel != len {
        return Err(Error::ShapeMismatch(format!(
            "{height}x{width}x{per_pixel} raster needs {} samples, got {len}",
            height * width * per_pixel
        )));
    }
    Ok(())
}

fn check_finite<T: Real>(data: &[T], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidValue(format!("non-finite {what} at index {i}"))),
        None => Ok(()),
    }
}

/// H×W×C raster, row-major and channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        check_dims(height, width, data.len(), channels)?;
        check_finite(&data, "sample")?;
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image<T>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn ensure_same_shape(&self, other: &Image<T>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    pub(crate) fn ensure_plane(&self, height: usize, width: usize, what: &str) -> Result<()> {
        if self.height == height && self.width == width {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: image is {}x{}, field is {height}x{width}",
                self.height, self.width
            )))
        }
    }

    /// Mean over channels, one value per pixel.
    pub fn luminance(&self) -> Vec<T> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let inv = T::one() / T::from_usize_lossy(self.channels);
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().copied().fold(T::zero(), |a, b| a + b) * inv)
            .collect()
    }

    /// Per-channel (min, max).
    pub fn channel_range(&self) -> Vec<(T, T)> {
        let mut out = vec![(T::infinity(), T::neg_infinity()); self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (r, &v) in out.iter_mut().zip(px) {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        out
    }

    pub fn mirror_horizontal(&self) -> Image<T> {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.at(y, self.width - 1 - x, c)
        })
        .expect("mirroring preserves validity")
    }

    /// Elementwise `f` over samples; fails if `f` produces non-finite values.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Image<T>> {
        Image::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn to_precision<U: Real>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// H×W real-valued field without sign constraints (gradients, SSIM maps,
/// sharpness maps).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> ScalarField<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        check_dims(height, width, data.len(), 1)?;
        check_finite(&data, "value")?;
        Ok(ScalarField {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ScalarField {
            height,
            width,
            data: vec![T::zero(); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::from_usize_lossy(self.data.len())
    }
}

/// Object distance per pixel, in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> DepthMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        check_dims(height, width, data.len(), 1)?;
        for (i, &d) in data.iter().enumerate() {
            if !d.is_finite() {
                return Err(Error::InvalidValue(format!("non-finite depth at index {i}")));
            }
            if d <= T::zero() {
                return Err(Error::InvalidValue(format!("non-positive depth {d} at index {i}")));
            }
        }
        Ok(DepthMap {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, depth: T) -> Result<Self> {
        Self::new(height, width, vec![depth; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    /// Rejects maps deeper than the scene's configured maximum.
    pub fn check_max_depth(&self, max_depth_m: T) -> Result<()> {
        let deepest = self.max_value();
        if deepest > max_depth_m {
            return Err(Error::InvalidValue(format!(
                "depth {deepest} exceeds scene maximum {max_depth_m}"
            )));
        }
        Ok(())
    }

    pub fn mirror_horizontal(&self) -> DepthMap<T> {
        DepthMap::from_fn(self.height, self.width, |y, x| self.at(y, self.width - 1 - x))
            .expect("mirroring preserves validity")
    }
}

/// How the renderer treats a pixel of a [`CocMap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CocState {
    /// Gaussian blur with the stored diameter.
    Blur,
    /// Diameter below one pixel: identity kernel, zero gradient.
    Delta,
    /// Diameter exceeded the kernel support and was clamped to it.
    Clamped,
}

/// Circle-of-confusion diameters in pixels, with the per-pixel clamp state.
#[derive(Clone, Debug, PartialEq)]
pub struct CocMap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
    states: Vec<CocState>,
}

impl<T: Real> CocMap<T> {
    /// Wraps raw diameters. Values below one pixel are marked [`CocState::Delta`];
    /// no upper clamp is applied.
    pub fn from_values(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        check_dims(height, width, values.len(), 1)?;
        for (i, &c) in values.iter().enumerate() {
            if !c.is_finite() || c < T::zero() {
                return Err(Error::InvalidValue(format!(
                    "CoC must be finite and non-negative, got {c} at index {i}"
                )));
            }
        }
        let states = values
            .iter()
            .map(|&c| if c < T::one() { CocState::Delta } else { CocState::Blur })
            .collect();
        Ok(CocMap {
            height,
            width,
            values,
            states,
        })
    }

    pub(crate) fn from_parts(height: usize, width: usize, values: Vec<T>, states: Vec<CocState>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        debug_assert_eq!(states.len(), height * width);
        CocMap {
            height,
            width,
            values,
            states,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn states(&self) -> &[CocState] {
        &self.states
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn state(&self, y: usize, x: usize) -> CocState {
        self.states[y * self.width + x]
    }

    pub fn is_all_delta(&self) -> bool {
        self.states.iter().all(|s| *s == CocState::Delta)
    }

    pub fn fraction(&self, state: CocState) -> f64 {
        self.states.iter().filter(|s| **s == state).count() as f64 / self.states.len() as f64
    }

    /// Copy with the diameter at `index` replaced; the state is re-derived
    /// from the new value as in [`CocMap::from_values`].
    pub fn with_value(&self, index: usize, value: T) -> Result<Self> {
        let mut values = self.values.clone();
        values[index] = value;
        let mut out = Self::from_values(self.height, self.width, values)?;
        for (i, s) in self.states.iter().enumerate() {
            if i != index {
                out.states[i] = *s;
            }
        }
        Ok(out)
    }

    pub fn mirror_horizontal(&self) -> CocMap<T> {
        let mut values = Vec::with_capacity(self.values.len());
        let mut states = Vec::with_capacity(self.values.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                values.push(self.at(y, x));
                states.push(self.state(y, x));
            }
        }
        CocMap::from_parts(self.height, self.width, values, states)
    }
}

/// One focused capture of the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct FocusSlice<T> {
    pub image: Image<T>,
    pub focus_distance_m: T,
}

/// All-in-focus image plus focused captures sharing one camera.
///
/// `camera` carries the lens; its focus distance is that of the first slice.
/// Use [`FocalStack::camera_for`] to get the camera focused for a given slice.
#[derive(Clone, Debug, PartialEq)]
pub struct FocalStack<T> {
    all_in_focus: Image<T>,
    slices: Vec<FocusSlice<T>>,
    camera: CameraIntrinsics<T>,
    max_depth_m: T,
    ground_truth_depth: Option<DepthMap<T>>,
}

impl<T: Real> FocalStack<T> {
    pub fn new(
        all_in_focus: Image<T>,
        slices: Vec<FocusSlice<T>>,
        camera: CameraIntrinsics<T>,
        max_depth_m: T,
        ground_truth_depth: Option<DepthMap<T>>,
    ) -> Result<Self> {
        if !(max_depth_m > T::zero()) || !max_depth_m.is_finite() {
            return Err(Error::InvalidStack(format!(
                "max depth must be positive, got {max_depth_m}"
            )));
        }
        let focal_m = camera.focal_length_m();
        for (i, s) in slices.iter().enumerate() {
            if !s.image.same_shape(&all_in_focus) {
                return Err(Error::InvalidStack(format!(
                    "dimension mismatch: slice {i} is {}x{}x{}, all-in-focus is {}x{}x{}",
                    s.image.height(),
                    s.image.width(),
                    s.image.channels(),
                    all_in_focus.height(),
                    all_in_focus.width(),
                    all_in_focus.channels()
                )));
            }
            if !s.focus_distance_m.is_finite() || s.focus_distance_m <= focal_m {
                return Err(Error::InvalidStack(format!(
                    "slice {i}: focus distance {} m must exceed the focal length {focal_m} m",
                    s.focus_distance_m
                )));
            }
            if let Some(j) = slices[..i]
                .iter()
                .position(|o| o.focus_distance_m == s.focus_distance_m)
            {
                return Err(Error::InvalidStack(format!(
                    "duplicate focus distance {} m (slices {j} and {i})",
                    s.focus_distance_m
                )));
            }
        }
        if let Some(gt) = &ground_truth_depth {
            all_in_focus
                .ensure_plane(gt.height(), gt.width(), "ground-truth depth")
                .map_err(|e| Error::InvalidStack(e.to_string()))?;
            gt.check_max_depth(max_depth_m)
                .map_err(|e| Error::InvalidStack(e.to_string()))?;
        }
        let camera = match slices.first() {
            Some(s) => camera.with_focus(s.focus_distance_m)?,
            None => camera,
        };
        Ok(FocalStack {
            all_in_focus,
            slices,
            camera,
            max_depth_m,
            ground_truth_depth,
        })
    }

    pub fn all_in_focus(&self) -> &Image<T> {
        &self.all_in_focus
    }

    pub fn slices(&self) -> &[FocusSlice<T>] {
        &self.slices
    }

    pub fn camera(&self) -> &CameraIntrinsics<T> {
        &self.camera
    }

    pub fn camera_for(&self, slice: usize) -> CameraIntrinsics<T> {
        self.camera
            .with_focus(self.slices[slice].focus_distance_m)
            .expect("slice focus distances validated at construction")
    }

    pub fn max_depth_m(&self) -> T {
        self.max_depth_m
    }

    pub fn ground_truth_depth(&self) -> Option<&DepthMap<T>> {
        self.ground_truth_depth.as_ref()
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn height(&self) -> usize {
        self.all_in_focus.height()
    }

    pub fn width(&self) -> usize {
        self.all_in_focus.width()
    }
}
