//! Synthetic crowd scenes drawn from parameterized domains.
//!
//! A [`DomainSpec`] is a samplable distribution over scenes. Geometry (head
//! count, placement, radii) and style (texture, noise) are drawn from two
//! separate random streams, so two specs that differ only in style produce the
//! same head layouts for the same seed.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Version tag of the shipped shift presets. Bump when any constant changes.
pub const PRESET_VERSION: u32 = 1;

/// Consecutive rejected placements tolerated for one head.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    Gradient,
    Speckle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// `(H, W)` in pixels.
    pub image_size: (usize, usize),
    /// Inclusive range of heads per scene.
    pub count_range: (usize, usize),
    /// Inclusive range of head radii in pixels.
    pub head_radius_range: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub background_texture: Texture,
    pub seed_stream: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("image_size {:?} must be positive", self.image_size)));
        }
        if self.count_range.0 > self.count_range.1 {
            return Err(Error::Config(format!("count_range {:?} has min > max", self.count_range)));
        }
        let (rlo, rhi) = self.head_radius_range;
        if !(rlo >= 1.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::Config(format!(
                "head_radius_range {:?} must satisfy 1 <= min <= max",
                self.head_radius_range
            )));
        }
        if !(0.0..=1.0).contains(&self.brightness) {
            return Err(Error::Config(format!("brightness {} outside [0,1]", self.brightness)));
        }
        if !(self.contrast > 0.0 && self.contrast <= 2.0) {
            return Err(Error::Config(format!("contrast {} outside (0,2]", self.contrast)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    /// Field-wise interpolation `a + t (b - a)`; image size snaps to a multiple
    /// of 4, the texture switches at `t = 0.5`, and the seed stream is `a`'s.
    pub fn interpolate(a: &DomainSpec, b: &DomainSpec, t: f64) -> DomainSpec {
        let lerp = |x: f64, y: f64| x + t * (y - x);
        let snap4 = |x: usize, y: usize| {
            let v = math::round(lerp(x as f64, y as f64) / 4.0) as usize * 4;
            v.max(4)
        };
        let near = |x: usize, y: usize| math::round(lerp(x as f64, y as f64)) as usize;
        DomainSpec {
            image_size: (snap4(a.image_size.0, b.image_size.0), snap4(a.image_size.1, b.image_size.1)),
            count_range: (near(a.count_range.0, b.count_range.0), near(a.count_range.1, b.count_range.1)),
            head_radius_range: (
                lerp(a.head_radius_range.0, b.head_radius_range.0),
                lerp(a.head_radius_range.1, b.head_radius_range.1),
            ),
            brightness: lerp(a.brightness, b.brightness),
            contrast: lerp(a.contrast, b.contrast),
            noise_sigma: lerp(a.noise_sigma, b.noise_sigma),
            background_texture: if t < 0.5 { a.background_texture } else { b.background_texture },
            seed_stream: a.seed_stream,
        }
    }

    /// Number of fields that differ from `other` (seed stream excluded).
    pub fn differing_fields(&self, other: &DomainSpec) -> usize {
        [
            self.image_size != other.image_size,
            self.count_range != other.count_range,
            self.head_radius_range != other.head_radius_range,
            self.brightness != other.brightness,
            self.contrast != other.contrast,
            self.noise_sigma != other.noise_sigma,
            self.background_texture != other.background_texture,
        ]
        .iter()
        .filter(|&&d| d)
        .count()
    }
}

/// One annotated head: integer center and disc radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPoint {
    pub row: usize,
    pub col: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub points: Vec<HeadPoint>,
    /// `[1, H, W]`, values in `{0, 1}`.
    pub gt_binary: Tensor,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.gt_binary.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.gt_binary.shape()[2]
    }

    /// Crops a `h x w` window at `(top, left)`. The ground truth is cut from the
    /// full-scene map so discs crossing the border stay clipped, and only heads
    /// whose centers fall inside the window are kept.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Scene> {
        let (c, hh, ww) = self.image.dims3()?;
        if top + h > hh || left + w > ww {
            return Err(Error::Shape {
                op: "Scene::crop",
                axes: "H,W",
                detail: format!("window {}x{} at ({},{}) exceeds {}x{}", h, w, top, left, hh, ww),
            });
        }
        let mut image = Tensor::zeros(&[c, h, w]);
        let mut gt = Tensor::zeros(&[1, h, w]);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    image.set3(ch, i, j, self.image.at3(ch, top + i, left + j));
                }
                gt.set3(0, i, j, self.gt_binary.at3(0, top + i, left + j));
            }
        }
        let points = self
            .points
            .iter()
            .filter(|p| p.row >= top && p.row < top + h && p.col >= left && p.col < left + w)
            .map(|p| HeadPoint { row: p.row - top, col: p.col - left, radius: p.radius })
            .collect();
        Ok(Scene { image, points, gt_binary: gt })
    }

    /// Uniformly random crop of the given size.
    pub fn random_crop<R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> Result<Scene> {
        let (hh, ww) = (self.height(), self.width());
        if h > hh || w > ww {
            return Err(Error::Config(format!("crop {}x{} larger than scene {}x{}", h, w, hh, ww)));
        }
        let top = rng.random_range(0..=hh - h);
        let left = rng.random_range(0..=ww - w);
        self.crop(top, left, h, w)
    }
}

fn mix_seed(seed: u64, stream: u64, lane: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(lane.wrapping_mul(0x94D0_49BB_1331_11EB))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Paired geometry and style random streams.
#[derive(Debug, Clone)]
pub struct SceneRng {
    pub geometry: ChaCha8Rng,
    pub style: ChaCha8Rng,
}

impl SceneRng {
    pub fn new(seed: u64, seed_stream: u64) -> Self {
        Self {
            geometry: ChaCha8Rng::seed_from_u64(mix_seed(seed, seed_stream, 0)),
            style: ChaCha8Rng::seed_from_u64(mix_seed(seed, seed_stream, 1)),
        }
    }

    pub fn for_spec(spec: &DomainSpec, seed: u64) -> Self {
        Self::new(seed, spec.seed_stream)
    }
}

/// Two heads are far enough apart when their discs cannot touch under
/// 4-connectivity and their centers are at least 2 px apart.
fn separated(a: &HeadPoint, row: usize, col: usize, radius: f64) -> bool {
    let dr = a.row as f64 - row as f64;
    let dc = a.col as f64 - col as f64;
    let d = math::sqrt(dr * dr + dc * dc);
    d >= 2.0 && d > a.radius + radius + 1.0
}

pub fn sample_scene(spec: &DomainSpec, rng: &mut SceneRng) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let g = &mut rng.geometry;
    let count = g.random_range(spec.count_range.0..=spec.count_range.1);
    let (rlo, rhi) = spec.head_radius_range;
    let mut points: Vec<HeadPoint> = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = if rlo == rhi { rlo } else { g.random_range(rlo..=rhi) };
        let mut rejected = 0;
        loop {
            let row = g.random_range(0..h);
            let col = g.random_range(0..w);
            if points.iter().all(|p| separated(p, row, col, radius)) {
                points.push(HeadPoint { row, col, radius });
                break;
            }
            rejected += 1;
            if rejected >= MAX_REJECTIONS {
                return Err(Error::Capacity {
                    placed: points.len(),
                    requested: count,
                    attempts: rejected,
                });
            }
        }
    }

    let gt_binary = render_binary_map(&points, spec.image_size)?;
    let image = render_image(spec, &points, &mut rng.style)?;
    Ok(Scene { image, points, gt_binary })
}

/// Draws `n` scenes from one seed.
pub fn sample_scenes(spec: &DomainSpec, seed: u64, n: usize) -> Result<Vec<Scene>> {
    let mut rng = SceneRng::for_spec(spec, seed);
    (0..n).map(|_| sample_scene(spec, &mut rng)).collect()
}

/// Union of hard discs: pixel `(i, j)` is 1 iff it lies within distance
/// `radius` of some head center.
pub fn render_binary_map(points: &[HeadPoint], image_size: (usize, usize)) -> Result<Tensor> {
    let (h, w) = image_size;
    let mut map = Tensor::zeros(&[1, h, w]);
    for p in points {
        if p.row >= h || p.col >= w {
            return Err(Error::Shape {
                op: "render_binary_map",
                axes: "point",
                detail: format!("point ({}, {}) outside {}x{}", p.row, p.col, h, w),
            });
        }
        let reach = math::floor(p.radius) as isize;
        let r2 = p.radius * p.radius;
        for di in -reach..=reach {
            for dj in -reach..=reach {
                let (i, j) = (p.row as isize + di, p.col as isize + dj);
                if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                    continue;
                }
                if (di * di + dj * dj) as f64 <= r2 {
                    map.set3(0, i as usize, j as usize, 1.0);
                }
            }
        }
    }
    Ok(map)
}

const HEAD_TINT: [f64; 3] = [1.0, 0.82, 0.64];
const BACKGROUND_TINT: [f64; 3] = [0.55, 0.65, 0.8];

fn render_image(spec: &DomainSpec, points: &[HeadPoint], style: &mut ChaCha8Rng) -> Result<Tensor> {
    let (h, w) = spec.image_size;

    // Geometry layer: radial cosine falloff, composited by max.
    let mut blobs = vec![0.0; h * w];
    for p in points {
        let extent = 1.5 * p.radius;
        let reach = math::floor(extent) as isize + 1;
        for di in -reach..=reach {
            for dj in -reach..=reach {
                let (i, j) = (p.row as isize + di, p.col as isize + dj);
                if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                    continue;
                }
                let d = math::sqrt((di * di + dj * dj) as f64);
                if d <= extent {
                    let v = 0.5 * (1.0 + math::cos(core::f64::consts::PI * d / extent));
                    let idx = i as usize * w + j as usize;
                    if v > blobs[idx] {
                        blobs[idx] = v;
                    }
                }
            }
        }
    }

    let mut background = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            background[i * w + j] = match spec.background_texture {
                Texture::Flat => 0.35,
                Texture::Gradient => 0.15 + 0.4 * j as f64 / (w.max(2) - 1) as f64,
                Texture::Speckle => 0.35 + style.random_range(-0.25..0.25),
            };
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let mut image = Tensor::zeros(&[3, h, w]);
    for ch in 0..3 {
        for idx in 0..h * w {
            let raw = (background[idx] * BACKGROUND_TINT[ch]).max(blobs[idx] * HEAD_TINT[ch]);
            let mut v = (0.5 + spec.contrast * (raw - 0.5)) * 2.0 * spec.brightness;
            if spec.noise_sigma > 0.0 {
                v += noise.sample(style);
            }
            image.data_mut()[ch * h * w + idx] = v.clamp(0.0, 1.0);
        }
    }
    Ok(image)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftPreset {
    ScaleUp,
    DensityUp,
    StyleDark,
    ResolutionDown,
    Mixed,
}

impl ShiftPreset {
    pub const ALL: [ShiftPreset; 5] = [
        ShiftPreset::ScaleUp,
        ShiftPreset::DensityUp,
        ShiftPreset::StyleDark,
        ShiftPreset::ResolutionDown,
        ShiftPreset::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftPreset::ScaleUp => "scale_up",
            ShiftPreset::DensityUp => "density_up",
            ShiftPreset::StyleDark => "style_dark",
            ShiftPreset::ResolutionDown => "resolution_down",
            ShiftPreset::Mixed => "mixed",
        }
    }

    /// `(source, target)` pair for this shift.
    pub fn specs(self) -> (DomainSpec, DomainSpec) {
        let source = source_spec();
        let mut target = source.clone();
        match self {
            ShiftPreset::ScaleUp => target.head_radius_range = (3.5, 4.5),
            ShiftPreset::DensityUp => target.count_range = (14, 22),
            ShiftPreset::StyleDark => target.brightness = 0.25,
            ShiftPreset::ResolutionDown => target.image_size = (48, 48),
            ShiftPreset::Mixed => {
                target.head_radius_range = (3.0, 4.0);
                target.count_range = (10, 16);
                target.brightness = 0.28;
                target.contrast = 0.7;
                target.noise_sigma = 0.06;
                target.background_texture = Texture::Speckle;
            }
        }
        (source, target)
    }

    /// Spec halfway between source and target; used as a known-closer
    /// intermediate domain in divergence checks.
    pub fn midpoint(self) -> DomainSpec {
        let (s, t) = self.specs();
        DomainSpec::interpolate(&s, &t, 0.5)
    }
}

impl fmt::Display for ShiftPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShiftPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shift preset '{}'", s)))
    }
}

/// Shared source domain of every preset.
pub fn source_spec() -> DomainSpec {
    DomainSpec {
        image_size: (64, 64),
        count_range: (4, 10),
        head_radius_range: (2.0, 3.0),
        brightness: 0.5,
        contrast: 1.0,
        noise_sigma: 0.02,
        background_texture: Texture::Flat,
        seed_stream: 0,
    }
}

/// Looks up a preset by name and returns its `(source, target)` specs.
pub fn shift_preset(name: &str) -> Result<(DomainSpec, DomainSpec)> {
    Ok(name.parse::<ShiftPreset>()?.specs())
}

pub fn preset_names() -> Vec<String> {
    ShiftPreset::ALL.iter().map(|p| String::from(p.name())).collect()
}
