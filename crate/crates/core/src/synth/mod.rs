//! Synthetic counting corpora with exact ground truth.
//!
//! Every scene is a pure function of its generator parameters and seed.
//! Object placement draws from a single ChaCha8 stream so that two scenes
//! built from the same seed with different counts share their common
//! prefix of objects, which is what the counterfactual pairs rely on.

mod dataset;
mod generate;
mod image;
mod prior;
mod qa;
pub mod raster;

pub use dataset::{read_dataset, read_manifest, regenerate, sha256_hex, write_dataset, Dataset, ManifestEntry, MANIFEST_FILE};
pub use generate::{
    gen_colorshape, gen_colorshape_balanced, gen_scatter, gen_syndot, gen_synpoly, make_pair,
    CounterfactualPair, GenParams,
};
pub use image::Image;
pub use prior::focus_prior;
pub use qa::{build_records, QARecord, Task, TaskMix};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The generator behind every random draw in this crate.
pub type Rng = ChaCha8Rng;

/// Identifier stored in manifests next to each seed.
pub const PRNG_ALGORITHM: &str = "chacha8";

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Canvas geometry: a square image cut into square patches, one image
/// token per patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub canvas_px: usize,
    pub patch_px: usize,
}

impl CanvasSpec {
    pub fn new(canvas_px: usize, patch_px: usize) -> Result<Self> {
        if patch_px == 0 || canvas_px == 0 || canvas_px % patch_px != 0 {
            return Err(Error::Config(format!(
                "patch size {patch_px} must divide canvas size {canvas_px}"
            )));
        }
        Ok(Self { canvas_px, patch_px })
    }

    /// The 64 px / 8 px geometry the toy model is built for.
    pub fn toy() -> Self {
        Self { canvas_px: 64, patch_px: 8 }
    }

    /// 336 px canvas with 28 px patches (a 12x12 grid).
    pub fn large() -> Self {
        Self { canvas_px: 336, patch_px: 28 }
    }

    pub fn grid(&self) -> usize {
        self.canvas_px / self.patch_px
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Pixel coordinates of the centre of patch `index` (row-major).
    pub fn patch_center(&self, index: usize) -> (f64, f64) {
        let g = self.grid();
        let (row, col) = (index / g, index % g);
        let half = self.patch_px as f64 / 2.0;
        (
            (col * self.patch_px) as f64 + half,
            (row * self.patch_px) as f64 + half,
        )
    }

    /// Patch containing the pixel point `(x, y)`.
    pub fn patch_of(&self, x: f64, y: f64) -> usize {
        let g = self.grid();
        let col = ((x / self.patch_px as f64).floor() as usize).min(g - 1);
        let row = ((y / self.patch_px as f64).floor() as usize).min(g - 1);
        row * g + col
    }

    /// Continuous patch-grid coordinates `(col, row)` of a pixel point; patch
    /// centres land on integers.
    pub fn to_patch_coords(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.patch_px as f64;
        (x / p - 0.5, y / p - 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    SynDot,
    SynPoly,
    ColorShape,
}

impl SceneKind {
    pub fn channels(&self) -> usize {
        match self {
            SceneKind::SynDot => 1,
            _ => 3,
        }
    }

    pub fn object_phrase(&self) -> &'static str {
        match self {
            SceneKind::SynDot => "black dots",
            SceneKind::SynPoly | SceneKind::ColorShape => "colorful polygons",
        }
    }
}

/// How object centres were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// One object per patch, centred on the patch.
    PatchGrid,
    /// Free positions, rejection-sampled so objects never touch.
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Triangle,
    Square,
    Pentagon,
    Hexagon,
    Octagon,
    Circle,
    Star,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Triangle,
        Shape::Square,
        Shape::Pentagon,
        Shape::Hexagon,
        Shape::Octagon,
        Shape::Circle,
        Shape::Star,
        Shape::Diamond,
    ];

    /// Regular polygons used by the polygon corpus, indexed by side count 3..=6.
    pub fn from_sides(sides: usize) -> Option<Shape> {
        match sides {
            3 => Some(Shape::Triangle),
            4 => Some(Shape::Square),
            5 => Some(Shape::Pentagon),
            6 => Some(Shape::Hexagon),
            8 => Some(Shape::Octagon),
            _ => None,
        }
    }

    /// Side count for regular polygons, `None` for the circle, star and diamond.
    pub fn sides(&self) -> Option<usize> {
        match self {
            Shape::Triangle => Some(3),
            Shape::Square => Some(4),
            Shape::Pentagon => Some(5),
            Shape::Hexagon => Some(6),
            Shape::Octagon => Some(8),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        crate::vocab::SHAPE_NAMES[Shape::ALL.iter().position(|s| s == self).unwrap()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
    Orange,
    Purple,
    Pink,
    Cyan,
    Brown,
    Gray,
    Black,
}

impl Color {
    /// The named fill palette; black is reserved for dots.
    pub const PALETTE: [Color; 10] = [
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Yellow,
        Color::Orange,
        Color::Purple,
        Color::Pink,
        Color::Cyan,
        Color::Brown,
        Color::Gray,
    ];

    pub fn rgb(&self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Blue => [40, 80, 220],
            Color::Green => [40, 170, 60],
            Color::Yellow => [235, 210, 40],
            Color::Orange => [245, 140, 30],
            Color::Purple => [140, 60, 190],
            Color::Pink => [240, 120, 180],
            Color::Cyan => [40, 200, 210],
            Color::Brown => [140, 90, 50],
            Color::Gray => [128, 128, 128],
            Color::Black => [0, 0, 0],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Color::Black => "black",
            c => crate::vocab::COLOR_NAMES[Color::PALETTE.iter().position(|p| p == c).unwrap()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectAttributes {
    pub shape: Shape,
    pub color: Color,
    pub radius_px: f64,
    /// Rotation in radians applied to the polygon vertices.
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedScene {
    pub id: String,
    pub generator: GenParams,
    pub kind: SceneKind,
    pub layout: Layout,
    pub canvas: CanvasSpec,
    pub seed: u64,
    pub count: usize,
    pub centers: Vec<(f64, f64)>,
    pub attributes: Vec<ObjectAttributes>,
    #[serde(skip)]
    pub image: Image,
}

impl RenderedScene {
    /// Per-pixel object index (`None` for background), rasterized from the
    /// stored geometry.
    pub fn instance_map(&self) -> Vec<Option<usize>> {
        let n = self.canvas.canvas_px;
        let mut map = vec![None; n * n];
        for (k, (c, a)) in self.centers.iter().zip(&self.attributes).enumerate() {
            raster::for_each_covered_pixel(n, *c, a, |x, y| map[y * n + x] = Some(k));
        }
        map
    }

    /// For each patch, the object owning it: the unique object with at least
    /// one pixel inside the patch. Patches touched by two objects or by none
    /// map to `None`.
    pub fn patch_instances(&self) -> Vec<Option<usize>> {
        let spec = self.canvas;
        let n = spec.canvas_px;
        let mut owner: Vec<Option<Option<usize>>> = vec![None; spec.n_patches()];
        for (k, (c, a)) in self.centers.iter().zip(&self.attributes).enumerate() {
            raster::for_each_covered_pixel(n, *c, a, |x, y| {
                let p = spec.patch_of(x as f64 + 0.5, y as f64 + 0.5);
                owner[p] = match owner[p] {
                    None => Some(Some(k)),
                    Some(Some(j)) if j == k => Some(Some(k)),
                    _ => Some(None),
                };
            });
        }
        owner.into_iter().map(|o| o.flatten()).collect()
    }

    /// Patches containing at least one object pixel.
    pub fn object_patches(&self) -> Vec<bool> {
        let spec = self.canvas;
        let mut hit = vec![false; spec.n_patches()];
        for (c, a) in self.centers.iter().zip(&self.attributes) {
            raster::for_each_covered_pixel(spec.canvas_px, *c, a, |x, y| {
                hit[spec.patch_of(x as f64 + 0.5, y as f64 + 0.5)] = true;
            });
        }
        hit
    }

    /// Patch pixels of image patch `index`, as three channels in `[0, 1]`
    /// laid out `[c][dy][dx]`. Grayscale images are replicated across channels.
    pub fn patch_pixels(&self, index: usize, out: &mut Vec<f64>) {
        let spec = self.canvas;
        let g = spec.grid();
        let (row, col) = (index / g, index % g);
        let p = spec.patch_px;
        for c in 0..3 {
            for dy in 0..p {
                for dx in 0..p {
                    let (x, y) = (col * p + dx, row * p + dy);
                    let ch = if self.image.channels == 1 { 0 } else { c };
                    out.push(self.image.get(x, y, ch) as f64 / 255.0);
                }
            }
        }
    }
}
