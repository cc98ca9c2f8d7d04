//! Procedural two-domain shape images with ground-truth content labels.
//!
//! Domain B draws filled shapes on a dark background; domain A draws the
//! same geometry as an outline with the palette inverted.

pub mod classifier;
pub mod dataset;
pub mod raster;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::networks::Domain;
use crate::seed;
use crate::tensor::Tensor;

pub use dataset::{generate_dataset, DatasetManifest, ManifestEntry};
pub use raster::{export_png, read_image, write_image};

/// Minimum distance between a shape's bounding box and the canvas edge.
pub const MARGIN: f32 = 2.0;
/// Subsamples per pixel side used for anti-aliasing.
pub const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Circle,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Cross,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Half extents `(rows, cols)` of the bounding box around the center,
    /// in units of the scale.
    fn extent(self) -> ((f32, f32), (f32, f32)) {
        match self {
            ShapeClass::Circle | ShapeClass::Cross => ((1.0, 1.0), (1.0, 1.0)),
            ShapeClass::Square => ((SQUARE_HALF, SQUARE_HALF), (SQUARE_HALF, SQUARE_HALF)),
            // apex up: one unit above the center, half a unit below
            ShapeClass::Triangle => ((1.0, 0.5), (SQRT3 / 2.0, SQRT3 / 2.0)),
        }
    }
}

const SQRT3: f32 = 1.732_050_8;
const SQUARE_HALF: f32 = 0.8;
const CROSS_HALF_WIDTH: f32 = 0.34;

/// Geometry of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub class: ShapeClass,
    /// `(row, col)` in pixels; pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.
    pub center: (f32, f32),
    /// Radius-like size in pixels (circumradius for the triangle).
    pub scale: f32,
    /// Seeds the pixel noise.
    pub content_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self, size: usize) -> Result<()> {
        let ((up, down), (left, right)) = self.class.extent();
        let (r, c) = self.center;
        let s = self.scale;
        let lim = size as f32 - MARGIN;
        let ok = s > 0.0
            && r - up * s >= MARGIN
            && r + down * s <= lim
            && c - left * s >= MARGIN
            && c + right * s <= lim;
        if !ok {
            return Err(Error::Config(format!(
                "{self:?} does not fit a {size}x{size} canvas with {MARGIN} px margin"
            )));
        }
        Ok(())
    }

    /// Random scene of `class` with a scale in `[0.2, 0.34]` of the canvas.
    pub fn sample<R: Rng>(class: ShapeClass, size: usize, rng: &mut R) -> Self {
        let sz = size as f32;
        let scale = rng.gen_range(0.2 * sz..=0.34 * sz);
        let ((up, down), (left, right)) = class.extent();
        let row = rng.gen_range(MARGIN + up * scale..=sz - MARGIN - down * scale);
        let col = rng.gen_range(MARGIN + left * scale..=sz - MARGIN - right * scale);
        SceneSpec {
            class,
            center: (row, col),
            scale,
            content_seed: rng.gen(),
        }
    }

    /// Signed distance in pixels from `(row, col)` to the shape boundary,
    /// negative inside.
    pub fn sdf(&self, row: f32, col: f32) -> f32 {
        let s = self.scale;
        let (x, y) = (col - self.center.1, self.center.0 - row);
        match self.class {
            ShapeClass::Circle => (x * x + y * y).sqrt() - s,
            ShapeClass::Square => sd_box(x, y, SQUARE_HALF * s, SQUARE_HALF * s),
            ShapeClass::Cross => {
                let w = CROSS_HALF_WIDTH * s;
                sd_box(x, y, s, w).min(sd_box(x, y, w, s))
            }
            ShapeClass::Triangle => sd_triangle(x, y + 0.25 * s, s * SQRT3 / 2.0),
        }
    }
}

fn sd_box(x: f32, y: f32, hx: f32, hy: f32) -> f32 {
    let (dx, dy) = (x.abs() - hx, y.abs() - hy);
    let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
    outside + dx.max(dy).min(0.0)
}

/// Equilateral triangle with half side `h`, centroid at the origin, apex up.
fn sd_triangle(x: f32, y: f32, h: f32) -> f32 {
    let k = SQRT3;
    let mut px = x.abs() - h;
    let mut py = y + h / k;
    if px + k * py > 0.0 {
        (px, py) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
    }
    px -= px.clamp(-2.0 * h, 0.0);
    -(px * px + py * py).sqrt() * py.signum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    Filled,
    Outlined,
}

/// Appearance of one domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleSpec {
    pub domain: Domain,
    pub fg: [f32; 3],
    pub bg: [f32; 3],
    pub mode: RenderMode,
    pub noise_sigma: f32,
    /// Inner stroke width in pixels (outlined mode only).
    pub stroke_width: f32,
}

impl StyleSpec {
    pub fn domain_b() -> Self {
        Self {
            domain: Domain::B,
            fg: [0.9, 0.7, 0.1],
            bg: [-0.8, -0.8, -0.7],
            mode: RenderMode::Filled,
            noise_sigma: 0.03,
            stroke_width: 0.0,
        }
    }

    pub fn domain_a() -> Self {
        let b = Self::domain_b();
        Self {
            domain: Domain::A,
            fg: b.fg.map(|v| -v),
            bg: b.bg.map(|v| -v),
            mode: RenderMode::Outlined,
            noise_sigma: 0.03,
            stroke_width: 2.0,
        }
    }

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::A => Self::domain_a(),
            Domain::B => Self::domain_b(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = self
            .fg
            .iter()
            .chain(&self.bg)
            .all(|v| (-1.0..=1.0).contains(v));
        let contrast = self
            .fg
            .iter()
            .zip(&self.bg)
            .any(|(f, b)| (f - b).abs() >= 0.5);
        if !in_range || !contrast || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("invalid style {self:?}")));
        }
        if self.mode == RenderMode::Outlined && self.stroke_width <= 0.0 {
            return Err(Error::Config(
                "outlined style needs a positive stroke width".into(),
            ));
        }
        Ok(())
    }
}

/// A rendered image with the style-independent filled-geometry mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: Tensor<f32>,
    /// `size x size`, 1 where at least half the pixel is inside the shape.
    pub mask: Vec<bool>,
}

/// Rasterizes `scene` in `style` on a `size x size` RGB canvas.
pub fn render(scene: &SceneSpec, style: &StyleSpec, size: usize) -> Result<Rendered> {
    scene.validate(size)?;
    style.validate()?;
    let ss = SUPERSAMPLE;
    let inv = 1.0 / (ss * ss) as f32;
    let mut image = Tensor::zeros(&[3, size, size]);
    let mut mask = vec![false; size * size];
    let noise =
        Normal::new(0.0f32, style.noise_sigma.max(f32::MIN_POSITIVE)).expect("finite sigma");
    let mut rng = seed::rng(
        scene.content_seed,
        match style.domain {
            Domain::A => "noise/A",
            Domain::B => "noise/B",
        },
    );
    let data = image.data_mut();
    for i in 0..size {
        for j in 0..size {
            let (mut filled, mut stroke) = (0usize, 0usize);
            for a in 0..ss {
                for b in 0..ss {
                    let r = i as f32 + (a as f32 + 0.5) / ss as f32;
                    let c = j as f32 + (b as f32 + 0.5) / ss as f32;
                    let d = scene.sdf(r, c);
                    if d <= 0.0 {
                        filled += 1;
                        if d >= -style.stroke_width {
                            stroke += 1;
                        }
                    }
                }
            }
            mask[i * size + j] = 2 * filled >= ss * ss;
            let cov = match style.mode {
                RenderMode::Filled => filled,
                RenderMode::Outlined => stroke,
            } as f32
                * inv;
            for ch in 0..3 {
                let mut v = style.fg[ch] * cov + style.bg[ch] * (1.0 - cov);
                if style.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data[(ch * size + i) * size + j] = v.clamp(-1.0, 1.0);
            }
        }
    }
    Ok(Rendered { image, mask })
}
