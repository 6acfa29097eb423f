//! Seeded synthetic scenes with known depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{quantize, save_camera_config, save_stack, BitDepth, DepthMap, FocalStack, Image, Manifest};
use crate::optics::CameraIntrinsics;
use crate::solver::{focal_sequence, render_stack};

/// A textured square at a quarter of the maximum depth in front of a
/// textured background at three quarters, with a flat grey patch in the
/// top-left corner of the background.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoPlaneScene {
    pub image: Image<f64>,
    pub depth: DepthMap<f64>,
    pub camera: CameraIntrinsics<f64>,
    pub max_depth_m: f64,
}

/// Seed of the scene shipped under `fixtures/two_plane`.
pub const FIXTURE_SEED: u64 = 7;
pub const FIXTURE_SIZE: usize = 64;
/// Stack sizes with a manifest in the shipped fixture.
pub const FIXTURE_STACKS: [usize; 3] = [1, 2, 6];

impl TwoPlaneScene {
    pub const MAX_DEPTH_M: f64 = 10.0;

    /// The scene behind the shipped fixture.
    pub fn fixture() -> Self {
        let mut scene = Self::new(FIXTURE_SIZE, FIXTURE_SEED);
        scene.image = quantize(&scene.image, BitDepth::Sixteen);
        scene
    }

    /// 35 mm f/2.8 lens, output scale 3, 11-pixel kernel. With these values
    /// neither plane sits near the 1-pixel or clamp threshold for any of the
    /// first six focus distances of the sequence.
    pub fn camera() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(35.0, 2.8, 2.0, 3.0)
            .and_then(|c| c.with_kernel_size(11))
            .expect("valid fixture camera")
    }

    pub fn near_depth() -> f64 {
        0.25 * Self::MAX_DEPTH_M
    }

    pub fn far_depth() -> f64 {
        0.75 * Self::MAX_DEPTH_M
    }

    pub fn new(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (size / 4, size - size / 4);
        let flat = (size / 5).max(1);
        let in_square = |y: usize, x: usize| (lo..hi).contains(&y) && (lo..hi).contains(&x);
        let noise: Vec<f64> = (0..size * size * 4).map(|_| rng.gen::<f64>()).collect();
        let image = Image::from_fn(size, size, 3, |y, x, c| {
            if y < flat && x < flat {
                return 0.5;
            }
            let p = (y * size + x) * 4;
            let base = noise[p];
            0.1 + 0.8 * (0.75 * base + 0.25 * noise[p + 1 + c])
        })
        .expect("finite texture");
        let depth = DepthMap::from_fn(size, size, |y, x| {
            if in_square(y, x) {
                Self::near_depth()
            } else {
                Self::far_depth()
            }
        })
        .expect("positive depths");
        TwoPlaneScene {
            image,
            depth,
            camera: Self::camera(),
            max_depth_m: Self::MAX_DEPTH_M,
        }
    }

    /// Stack of the first `n` focus distances of the standard sequence.
    pub fn stack(&self, n: usize) -> Result<FocalStack<f64>> {
        let focus = focal_sequence(n, self.max_depth_m)?;
        render_stack(&self.image, &self.depth, &self.camera, &focus, self.max_depth_m)
    }

    /// Writes the all-in-focus image, ground truth, the camera as
    /// `camera.txt`, the largest stack's slices, and one manifest
    /// `stack_f{n}.txt` per stack size (each a prefix of the largest).
    pub fn write_fixture(&self, dir: impl AsRef<Path>, sizes: &[usize]) -> Result<()> {
        let dir = dir.as_ref();
        let largest = sizes.iter().copied().max().unwrap_or(1);
        let manifest_path = save_stack(&self.stack(largest)?, dir)?;
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let full = Manifest::parse(&text).map_err(|m| Error::format(&manifest_path, m))?;
        for &n in sizes {
            let mut m = full.clone();
            let mut kept = 0;
            m.blocks.retain(|b| {
                if b.name != "slice" {
                    return true;
                }
                kept += 1;
                kept <= n
            });
            let path = dir.join(format!("stack_f{n}.txt"));
            fs::write(&path, m.to_string()).map_err(|e| Error::io(&path, e))?;
        }
        save_camera_config(&self.camera, dir.join("camera.txt"))
    }
}
