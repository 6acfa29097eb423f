//! Thin-lens camera model: circle-of-confusion size as a function of object
//! distance, its conversion to pixels, and the clamps the renderer relies on.
//!
//! The blur diameter on the sensor is
//!
//! ```text
//! C_mm = A * |d - D_f| / d * F / (D_f - F),     A = F / N
//! C_px = C_mm / (p * s)
//! ```
//!
//! with `F` the focal length, `N` the f-number, `D_f` the focus distance,
//! `p` the pixel pitch and `s` the output scale. `F` is stored in millimetres
//! and converted to metres inside the `F / (D_f - F)` factor.
//!
//! Diameters below one pixel are rendered as a delta kernel; diameters above
//! `kernel_size - 1` are clamped so the Gaussian fits the kernel window. Both
//! clamps are flat, so their depth derivative is zero.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{CocMap, CocState, DepthMap};
use crate::scalar::Real;

pub const DEFAULT_PIXEL_SIZE_MM: f64 = 0.0056;
pub const DEFAULT_KERNEL_SIZE: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics<T> {
    focal_length_mm: T,
    f_number: T,
    focus_distance_m: T,
    pixel_size_mm: T,
    output_scale: T,
    kernel_size: usize,
}

fn positive<T: Real>(v: T, what: &str) -> Result<()> {
    if v.is_finite() && v > T::zero() {
        Ok(())
    } else {
        Err(Error::InvalidCamera(format!("{what} must be positive and finite, got {v}")))
    }
}

impl<T: Real> CameraIntrinsics<T> {
    /// Camera with the default pixel pitch (5.6 µm) and a 7×7 kernel.
    pub fn new(focal_length_mm: T, f_number: T, focus_distance_m: T, output_scale: T) -> Result<Self> {
        let cam = CameraIntrinsics {
            focal_length_mm,
            f_number,
            focus_distance_m,
            pixel_size_mm: T::lit(DEFAULT_PIXEL_SIZE_MM),
            output_scale,
            kernel_size: DEFAULT_KERNEL_SIZE,
        };
        cam.validate()?;
        Ok(cam)
    }

    fn validate(&self) -> Result<()> {
        positive(self.focal_length_mm, "focal length")?;
        positive(self.f_number, "f-number")?;
        positive(self.focus_distance_m, "focus distance")?;
        positive(self.pixel_size_mm, "pixel size")?;
        positive(self.output_scale, "output scale")?;
        if self.focus_distance_m <= self.focal_length_m() {
            return Err(Error::InvalidCamera(format!(
                "focus distance {} m must exceed the focal length {} m",
                self.focus_distance_m,
                self.focal_length_m()
            )));
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 || self.kernel_size > 63 {
            return Err(Error::InvalidCamera(format!(
                "kernel size must be odd and in 3..=63, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn with_focus(&self, focus_distance_m: T) -> Result<Self> {
        let cam = CameraIntrinsics {
            focus_distance_m,
            ..*self
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_pixel_size_mm(&self, pixel_size_mm: T) -> Result<Self> {
        let cam = CameraIntrinsics {
            pixel_size_mm,
            ..*self
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_kernel_size(&self, kernel_size: usize) -> Result<Self> {
        let cam = CameraIntrinsics {
            kernel_size,
            ..*self
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn focal_length_mm(&self) -> T {
        self.focal_length_mm
    }

    pub fn focal_length_m(&self) -> T {
        self.focal_length_mm / T::lit(1000.0)
    }

    pub fn f_number(&self) -> T {
        self.f_number
    }

    pub fn focus_distance_m(&self) -> T {
        self.focus_distance_m
    }

    pub fn pixel_size_mm(&self) -> T {
        self.pixel_size_mm
    }

    pub fn output_scale(&self) -> T {
        self.output_scale
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    /// Lens diameter `F / N` in millimetres.
    pub fn aperture_mm(&self) -> T {
        self.focal_length_mm / self.f_number
    }

    /// Largest diameter whose Gaussian still fits the kernel window.
    pub fn max_coc_pixels(&self) -> T {
        T::from_usize_lossy(self.kernel_size - 1)
    }

    /// `A * F / (D_f - F)` in millimetres: the blur diameter of a point at
    /// infinity.
    fn infinity_coc_mm(&self) -> T {
        let f_m = self.focal_length_m();
        self.aperture_mm() * f_m / (self.focus_distance_m - f_m)
    }

    fn pixels_per_mm(&self) -> T {
        T::one() / (self.pixel_size_mm * self.output_scale)
    }

    fn check_distance(d_o: T) -> Result<()> {
        if d_o.is_finite() && d_o > T::zero() {
            Ok(())
        } else {
            Err(Error::InvalidValue(format!("object distance must be positive, got {d_o}")))
        }
    }

    #[inline]
    fn coc_mm_unchecked(&self, d_o: T) -> T {
        self.infinity_coc_mm() * (d_o - self.focus_distance_m).abs() / d_o
    }

    /// Blur-circle diameter on the sensor, in millimetres.
    pub fn coc_mm(&self, d_o: T) -> Result<T> {
        Self::check_distance(d_o)?;
        Ok(self.coc_mm_unchecked(d_o))
    }

    /// Blur-circle diameter in output pixels, before any clamp.
    pub fn coc_pixels(&self, d_o: T) -> Result<T> {
        Ok(self.coc_mm(d_o)? * self.pixels_per_mm())
    }

    #[inline]
    fn classify(&self, raw: T) -> (T, CocState) {
        if raw < T::one() {
            (raw, CocState::Delta)
        } else if raw > self.max_coc_pixels() {
            (self.max_coc_pixels(), CocState::Clamped)
        } else {
            (raw, CocState::Blur)
        }
    }

    /// Clamped diameter and state for one object distance.
    pub fn coc_state(&self, d_o: T) -> Result<(T, CocState)> {
        Ok(self.classify(self.coc_pixels(d_o)?))
    }

    /// Derivative of the clamped pixel diameter with respect to object
    /// distance (pixels per metre). Zero inside both clamps and at the focus
    /// distance itself.
    pub fn d_coc_d_depth(&self, d_o: T) -> Result<T> {
        let (_, state) = self.coc_state(d_o)?;
        if state != CocState::Blur || d_o == self.focus_distance_m {
            return Ok(T::zero());
        }
        let k = self.infinity_coc_mm() * self.pixels_per_mm();
        let magnitude = k * self.focus_distance_m / (d_o * d_o);
        Ok(if d_o > self.focus_distance_m { magnitude } else { -magnitude })
    }

    /// Per-pixel clamped CoC map for a depth map.
    pub fn coc_map(&self, depth: &DepthMap<T>) -> CocMap<T> {
        let scale = self.pixels_per_mm();
        let (values, states): (Vec<T>, Vec<CocState>) = depth
            .data()
            .par_iter()
            .map(|&d| self.classify(self.coc_mm_unchecked(d) * scale))
            .unzip();
        CocMap::from_parts(depth.height(), depth.width(), values, states)
    }
}

pub fn aperture_mm<T: Real>(cam: &CameraIntrinsics<T>) -> T {
    cam.aperture_mm()
}

pub fn coc_map<T: Real>(cam: &CameraIntrinsics<T>, depth: &DepthMap<T>) -> CocMap<T> {
    cam.coc_map(depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kitti_like() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(35.0, 2.8, 2.0, 2.0).unwrap()
    }

    /// Independent evaluation of the thin-lens formula in SI units.
    fn coc_mm_oracle(f_mm: f64, n: f64, df_m: f64, d_m: f64) -> f64 {
        let f = f_mm * 1e-3;
        let a = f / n;
        a * (d_m - df_m).abs() / d_m * f / (df_m - f) * 1e3
    }

    #[test]
    fn aperture_examples() {
        let cam = |f: f64, n: f64| CameraIntrinsics::new(f, n, 10.0, 1.0).unwrap();
        assert!((cam(35.0, 2.8).aperture_mm() - 12.5).abs() < 1e-12);
        assert_eq!(cam(35.0, 35.0).aperture_mm(), 1.0);
        assert_eq!(aperture_mm(&cam(50.0, 2.0)), 25.0);
    }

    #[test]
    fn coc_reference_values() {
        let cam = kitti_like();
        assert_eq!(cam.coc_mm(2.0).unwrap(), 0.0);
        let c = cam.coc_mm(4.0).unwrap();
        assert!((c - coc_mm_oracle(35.0, 2.8, 2.0, 4.0)).abs() < 1e-14);
        assert!((c - 0.11132).abs() / 0.11132 < 1e-4);
        let far = cam.coc_mm(1e6).unwrap();
        assert!((far - 0.22264).abs() / 0.22264 < 1e-4);
        let px = cam.coc_pixels(4.0).unwrap();
        assert!((px - 9.939).abs() / 9.939 < 1e-4);
    }

    #[test]
    fn pixel_conversion_is_exact_for_one_pixel() {
        // coc_mm = 0.0112 with p = 0.0056, s = 2 must map to exactly one pixel;
        // solve for the distance that produces it.
        let cam = kitti_like();
        let k = 12.5 * 0.035 / (2.0 - 0.035);
        let d = 2.0 / (1.0 - 0.0112 / k);
        assert!((cam.coc_mm(d).unwrap() - 0.0112).abs() < 1e-15);
        let px = cam.coc_pixels(d).unwrap();
        assert!((px - 1.0).abs() < 1e-12);
        assert!(cam.coc_pixels(0.0).is_err());
        assert!(cam.coc_pixels(-1.0).is_err());
    }

    #[test]
    fn camera_validation() {
        assert!(CameraIntrinsics::new(35.0, 2.8, 0.035, 2.0).is_err());
        assert!(CameraIntrinsics::new(35.0, 0.0, 2.0, 2.0).is_err());
        let cam = kitti_like();
        assert!(cam.with_kernel_size(6).is_err());
        assert!(cam.with_kernel_size(1).is_err());
        assert!(cam.with_kernel_size(9).is_ok());
        assert!(cam.with_pixel_size_mm(-1.0).is_err());
    }

    #[test]
    fn coc_map_clamps() {
        let cam = kitti_like();
        let depth = DepthMap::constant(3, 4, 2.0).unwrap();
        assert!(coc_map(&cam, &depth).is_all_delta());

        let depth = DepthMap::constant(1, 1, 4.0).unwrap();
        let m = cam.coc_map(&depth);
        assert_eq!(m.values(), &[6.0]);
        assert_eq!(m.states(), &[CocState::Clamped]);

        // every pixel within a few centimetres of focus is sub-pixel
        let depth = DepthMap::from_fn(4, 4, |y, x| 1.98 + 0.0025 * (y * 4 + x) as f64).unwrap();
        let m = cam.coc_map(&depth);
        assert!(m.values().iter().all(|&c| c < 1.0));
        assert!(m.is_all_delta());
    }

    #[test]
    fn derivative_matches_central_differences() {
        let cam = kitti_like().with_kernel_size(31).unwrap();
        for &d in &[1.5, 1.8, 2.5, 4.0, 10.0] {
            let h = 1e-4 * d;
            let fd = (cam.coc_pixels(d + h).unwrap() - cam.coc_pixels(d - h).unwrap()) / (2.0 * h);
            let an = cam.d_coc_d_depth(d).unwrap();
            assert!((an - fd).abs() / fd.abs() < 1e-6, "d={d}: {an} vs {fd}");
        }
        assert!(cam.d_coc_d_depth(1.5).unwrap() < 0.0);
        assert!(cam.d_coc_d_depth(2.5).unwrap() > 0.0);
    }

    #[test]
    fn derivative_vanishes_in_clamps() {
        let cam = kitti_like();
        assert_eq!(cam.d_coc_d_depth(2.0).unwrap(), 0.0);
        assert_eq!(cam.d_coc_d_depth(2.01).unwrap(), 0.0);
        assert_eq!(cam.d_coc_d_depth(40.0).unwrap(), 0.0);
    }

    #[test]
    fn coc_is_monotone_on_each_side_of_focus() {
        let cam = kitti_like();
        let near: Vec<f64> = (1..=1000).map(|i| 0.05 + 1.95 * i as f64 / 1001.0).collect();
        let far: Vec<f64> = (0..1000).map(|i| 2.0 + 0.1 * (i + 1) as f64).collect();
        let c = |d: f64| cam.coc_mm(d).unwrap();
        assert!(near.windows(2).all(|w| c(w[0]) > c(w[1])));
        assert!(far.windows(2).all(|w| c(w[0]) < c(w[1])));
        assert!(near.iter().chain(&far).all(|&d| c(d) > 0.0));
    }

    #[test]
    fn coc_is_not_injective_across_focus() {
        let cam = kitti_like();
        let far = 4.0;
        let target = cam.coc_mm(far).unwrap();
        // (D_f - d)/d = target/K on the near side
        let near = 2.0 / (1.0 + target / cam.coc_mm(1e15).unwrap());
        assert!(near < 2.0);
        assert!((cam.coc_mm(near).unwrap() - target).abs() < 1e-9);
    }
}
