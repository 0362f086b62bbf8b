use std::f64::consts::TAU;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::qa::{QARecord, Task};
use super::{
    raster, rng, CanvasSpec, Color, Image, Layout, ObjectAttributes, RenderedScene, Rng,
    SceneKind, Shape,
};
use crate::{Error, Result};

/// Everything needed to regenerate a scene bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "lowercase")]
pub enum GenParams {
    SynDot { count: usize, radius_px: usize, seed: u64 },
    SynPoly { count: usize, radius_px: usize, seed: u64 },
    /// Polygons at free (non-grid) positions with radii drawn per object.
    Scatter { count: usize, radius_min: usize, radius_max: usize, seed: u64 },
    ColorShape { seed: u64 },
    /// Single object with a prescribed colour and shape.
    ColorShapeFixed { color: Color, shape: Shape, seed: u64 },
}

impl GenParams {
    pub fn generate(&self, spec: CanvasSpec) -> Result<RenderedScene> {
        match *self {
            GenParams::SynDot { count, radius_px, seed } => gen_syndot(spec, count, radius_px, seed),
            GenParams::SynPoly { count, radius_px, seed } => gen_synpoly(spec, count, radius_px, seed),
            GenParams::Scatter { count, radius_min, radius_max, seed } => {
                gen_scatter(spec, count, radius_min, radius_max, seed)
            }
            GenParams::ColorShape { seed } => Ok(gen_colorshape(spec, seed)?.0),
            GenParams::ColorShapeFixed { color, shape, seed } => {
                colorshape_scene(spec, color, shape, &mut rng(seed), seed)
            }
        }
    }

    pub fn seed(&self) -> u64 {
        match *self {
            GenParams::SynDot { seed, .. }
            | GenParams::SynPoly { seed, .. }
            | GenParams::Scatter { seed, .. }
            | GenParams::ColorShape { seed }
            | GenParams::ColorShapeFixed { seed, .. } => seed,
        }
    }
}

fn check_grid_object(spec: CanvasSpec, count: usize, radius_px: usize) -> Result<()> {
    if radius_px == 0 || 2 * radius_px + 1 >= spec.patch_px {
        return Err(Error::Config(format!(
            "radius {radius_px} px does not fit strictly inside a {} px patch",
            spec.patch_px
        )));
    }
    if count > spec.n_patches() {
        return Err(Error::Capacity {
            requested: count,
            capacity: spec.n_patches(),
        });
    }
    Ok(())
}

/// Draws `count` distinct patch indices; each draw is followed by the
/// per-object attribute draws so every prefix is independent of `count`.
fn place_on_grid<A>(
    spec: CanvasSpec,
    count: usize,
    rng: &mut Rng,
    mut attr: impl FnMut(&mut Rng) -> A,
) -> Vec<(usize, A)> {
    let mut cells: Vec<usize> = (0..spec.n_patches()).collect();
    let n = cells.len();
    (0..count)
        .map(|i| {
            let j = rng.random_range(i..n);
            cells.swap(i, j);
            (cells[i], attr(rng))
        })
        .collect()
}

fn render(
    id: String,
    generator: GenParams,
    kind: SceneKind,
    layout: Layout,
    spec: CanvasSpec,
    seed: u64,
    centers: Vec<(f64, f64)>,
    attributes: Vec<ObjectAttributes>,
) -> RenderedScene {
    let n = spec.canvas_px;
    let mut image = Image::white(n, n, kind.channels());
    for (c, a) in centers.iter().zip(&attributes) {
        let rgb = a.color.rgb();
        raster::for_each_covered_pixel(n, *c, a, |x, y| image.put(x, y, rgb));
    }
    RenderedScene {
        id,
        generator,
        kind,
        layout,
        canvas: spec,
        seed,
        count: centers.len(),
        centers,
        attributes,
        image,
    }
}

/// White canvas with `count` black dots centred on distinct patches.
pub fn gen_syndot(spec: CanvasSpec, count: usize, radius_px: usize, seed: u64) -> Result<RenderedScene> {
    check_grid_object(spec, count, radius_px)?;
    let mut rng = rng(seed);
    let placed = place_on_grid(spec, count, &mut rng, |_| ());
    let centers = placed.iter().map(|(p, _)| spec.patch_center(*p)).collect();
    let attributes = vec![
        ObjectAttributes {
            shape: Shape::Circle,
            color: Color::Black,
            radius_px: radius_px as f64,
            rotation: 0.0,
        };
        count
    ];
    Ok(render(
        format!("syndot_n{count}_s{seed}"),
        GenParams::SynDot { count, radius_px, seed },
        SceneKind::SynDot,
        Layout::PatchGrid,
        spec,
        seed,
        centers,
        attributes,
    ))
}

/// White canvas with `count` filled regular polygons (3 to 6 sides) in
/// palette colours, one per patch.
pub fn gen_synpoly(spec: CanvasSpec, count: usize, radius_px: usize, seed: u64) -> Result<RenderedScene> {
    check_grid_object(spec, count, radius_px)?;
    let mut rng = rng(seed);
    let placed = place_on_grid(spec, count, &mut rng, |r| random_polygon(r, radius_px as f64));
    let (centers, attributes) = placed
        .into_iter()
        .map(|(p, a)| (spec.patch_center(p), a))
        .unzip();
    Ok(render(
        format!("synpoly_n{count}_s{seed}"),
        GenParams::SynPoly { count, radius_px, seed },
        SceneKind::SynPoly,
        Layout::PatchGrid,
        spec,
        seed,
        centers,
        attributes,
    ))
}

fn random_polygon(rng: &mut Rng, radius: f64) -> ObjectAttributes {
    let sides = rng.random_range(3..=6);
    let color = Color::PALETTE[rng.random_range(0..Color::PALETTE.len())];
    let rotation = rng.random::<f64>() * TAU;
    ObjectAttributes {
        shape: Shape::from_sides(sides).expect("3..=6 sides"),
        color,
        radius_px: radius,
        rotation,
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Polygons at free positions, possibly spanning several patches. Objects
/// keep a gap of at least two pixels between their bounding circles.
pub fn gen_scatter(
    spec: CanvasSpec,
    count: usize,
    radius_min: usize,
    radius_max: usize,
    seed: u64,
) -> Result<RenderedScene> {
    if radius_min == 0 || radius_min > radius_max || 2 * radius_max + 2 >= spec.canvas_px {
        return Err(Error::Config(format!(
            "radius range {radius_min}..={radius_max} does not fit the canvas"
        )));
    }
    let mut rng = rng(seed);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(count);
    let mut attributes: Vec<ObjectAttributes> = Vec::with_capacity(count);
    let n = spec.canvas_px as f64;
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let r = rng.random_range(radius_min..=radius_max) as f64;
            let x = rng.random_range(r + 1.0..n - r - 1.0);
            let y = rng.random_range(r + 1.0..n - r - 1.0);
            let clear = centers.iter().zip(&attributes).all(|(c, a)| {
                let d = ((c.0 - x).powi(2) + (c.1 - y).powi(2)).sqrt();
                d >= r + a.radius_px + 2.0
            });
            let attr = random_polygon(&mut rng, r);
            if clear {
                centers.push((x, y));
                attributes.push(attr);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Capacity {
                requested: count,
                capacity: centers.len(),
            });
        }
    }
    Ok(render(
        format!("scatter_n{count}_s{seed}"),
        GenParams::Scatter { count, radius_min, radius_max, seed },
        SceneKind::SynPoly,
        Layout::Free,
        spec,
        seed,
        centers,
        attributes,
    ))
}

/// Radius range of the single colour/shape object, scaled from 30..80 px on
/// a 336 px canvas.
fn colorshape_radius_range(spec: CanvasSpec) -> (usize, usize) {
    let scale = spec.canvas_px as f64 / 336.0;
    let lo = (30.0 * scale).round().max(2.0) as usize;
    let hi = ((80.0 * scale).round() as usize).max(lo);
    (lo, hi)
}

fn colorshape_scene(
    spec: CanvasSpec,
    color: Color,
    shape: Shape,
    rng: &mut Rng,
    seed: u64,
) -> Result<RenderedScene> {
    let (lo, hi) = colorshape_radius_range(spec);
    if 2 * hi + 2 >= spec.canvas_px {
        return Err(Error::Config(format!(
            "canvas {} px too small for colour/shape objects",
            spec.canvas_px
        )));
    }
    let r = rng.random_range(lo..=hi) as f64;
    let n = spec.canvas_px as f64;
    let x = rng.random_range(r + 1.0..n - r - 1.0);
    let y = rng.random_range(r + 1.0..n - r - 1.0);
    let rotation = rng.random::<f64>() * TAU;
    let attr = ObjectAttributes {
        shape,
        color,
        radius_px: r,
        rotation,
    };
    Ok(render(
        format!("colorshape_{}_{}_s{seed}", color.name(), shape.name()),
        GenParams::ColorShapeFixed { color, shape, seed },
        SceneKind::ColorShape,
        Layout::Free,
        spec,
        seed,
        vec![(x, y)],
        vec![attr],
    ))
}

/// One object with random colour and shape, paired with a colour or shape
/// question (equal odds).
pub fn gen_colorshape(spec: CanvasSpec, seed: u64) -> Result<(RenderedScene, QARecord)> {
    let mut rng = rng(seed);
    let color = Color::PALETTE[rng.random_range(0..Color::PALETTE.len())];
    let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
    let ask_color = rng.random_bool(0.5);
    let mut scene = colorshape_scene(spec, color, shape, &mut rng, seed)?;
    scene.id = format!("colorshape_s{seed}");
    scene.generator = GenParams::ColorShape { seed };
    let task = if ask_color { Task::Color } else { Task::Shape };
    let record = QARecord::new(&scene, task)?;
    Ok((scene, record))
}

/// `per_combo` scenes for each of the 80 colour x shape combinations, in a
/// seeded shuffled order; questions alternate colour/shape within a combo.
pub fn gen_colorshape_balanced(
    spec: CanvasSpec,
    per_combo: usize,
    seed: u64,
) -> Result<Vec<(RenderedScene, QARecord)>> {
    let mut order = rng(seed);
    let mut cells = Vec::with_capacity(80 * per_combo);
    for color in Color::PALETTE {
        for shape in Shape::ALL {
            for k in 0..per_combo {
                cells.push((color, shape, k));
            }
        }
    }
    for i in (1..cells.len()).rev() {
        let j = order.random_range(0..=i);
        cells.swap(i, j);
    }
    cells
        .into_iter()
        .enumerate()
        .map(|(i, (color, shape, k))| {
            let scene_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let params = GenParams::ColorShapeFixed { color, shape, seed: scene_seed };
            let mut scene = params.generate(spec)?;
            scene.id = format!("colorshape_{i:05}");
            let task = if k % 2 == 0 { Task::Color } else { Task::Shape };
            let record = QARecord::new(&scene, task)?;
            Ok((scene, record))
        })
        .collect()
}

/// Clean/corrupted scenes with different counts drawn from the same
/// placement stream; the smaller scene is a prefix of the larger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub clean: RenderedScene,
    pub corrupted: RenderedScene,
    pub shared_seed: u64,
}

pub fn make_pair(
    spec: CanvasSpec,
    kind: SceneKind,
    radius_px: usize,
    clean_count: usize,
    corrupted_count: usize,
    seed: u64,
) -> Result<CounterfactualPair> {
    if clean_count == corrupted_count {
        return Err(Error::Contract(format!(
            "counterfactual pair needs different counts, got {clean_count} twice"
        )));
    }
    let gen = |count| match kind {
        SceneKind::SynDot => gen_syndot(spec, count, radius_px, seed),
        SceneKind::SynPoly => gen_synpoly(spec, count, radius_px, seed),
        SceneKind::ColorShape => Err(Error::Config(
            "counterfactual pairs are defined for counting scenes only".into(),
        )),
    };
    Ok(CounterfactualPair {
        clean: gen(clean_count)?,
        corrupted: gen(corrupted_count)?,
        shared_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent crossing-number point-in-polygon test. Returns `None`
    /// when the point lies within `tol` of an edge.
    fn crossing_inside(poly: &[(f64, f64)], p: (f64, f64), tol: f64) -> Option<bool> {
        let n = poly.len();
        let mut inside = false;
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let (ex, ey) = (b.0 - a.0, b.1 - a.1);
            let t = (((p.0 - a.0) * ex + (p.1 - a.1) * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
            let (qx, qy) = (a.0 + t * ex - p.0, a.1 + t * ey - p.1);
            if (qx * qx + qy * qy).sqrt() < tol {
                return None;
            }
            if (a.1 > p.1) != (b.1 > p.1) {
                let x_cross = a.0 + (p.1 - a.1) / (b.1 - a.1) * (b.0 - a.0);
                if p.0 < x_cross {
                    inside = !inside;
                }
            }
        }
        Some(inside)
    }

    fn regular_vertices(n: usize, c: (f64, f64), r: f64, rot: f64) -> Vec<(f64, f64)> {
        (0..n)
            .map(|k| {
                let t = rot + TAU * k as f64 / n as f64;
                (c.0 + r * t.cos(), c.1 + r * t.sin())
            })
            .collect()
    }

    fn components(img: &Image) -> usize {
        let (w, h) = (img.width, img.height);
        let ink = |x: usize, y: usize| (0..img.channels).any(|c| img.get(x, y, c) != 255);
        let mut seen = vec![false; w * h];
        let mut n = 0;
        for y0 in 0..h {
            for x0 in 0..w {
                if seen[y0 * w + x0] || !ink(x0, y0) {
                    continue;
                }
                n += 1;
                let mut stack = vec![(x0, y0)];
                seen[y0 * w + x0] = true;
                while let Some((x, y)) = stack.pop() {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                continue;
                            }
                            let (nx, ny) = (nx as usize, ny as usize);
                            if !seen[ny * w + nx] && ink(nx, ny) {
                                seen[ny * w + nx] = true;
                                stack.push((nx, ny));
                            }
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn zero_count_is_blank() {
        let s = gen_syndot(CanvasSpec::large(), 0, 4, 99).unwrap();
        assert!(s.image.data.iter().all(|&v| v == 255));
        assert!(s.centers.is_empty());
        assert_eq!(s.count, 0);
    }

    #[test]
    fn large_geometry_is_twelve_by_twelve() {
        let spec = CanvasSpec::large();
        assert_eq!(spec.grid(), 12);
        let s = gen_syndot(spec, 10, 4, 3).unwrap();
        assert_eq!(s.count, 10);
        assert_eq!(components(&s.image), 10);
        let p = gen_synpoly(spec, 10, 8, 3).unwrap();
        assert_eq!(components(&p.image), 10);
    }

    #[test]
    fn determinism() {
        let spec = CanvasSpec::new(64, 8).unwrap();
        let a = gen_syndot(spec, 5, 2, 7).unwrap();
        let b = gen_syndot(spec, 5, 2, 7).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.centers, b.centers);
    }

    #[test]
    fn capacity_and_radius_errors() {
        let spec = CanvasSpec::toy();
        assert!(matches!(
            gen_syndot(spec, 65, 2, 0),
            Err(Error::Capacity { requested: 65, capacity: 64 })
        ));
        assert!(gen_syndot(spec, 64, 2, 0).is_ok());
        assert!(matches!(gen_syndot(spec, 3, 4, 0), Err(Error::Config(_))));
        assert!(matches!(gen_synpoly(spec, 3, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn syndot_centers_are_distinct_patch_centers() {
        let spec = CanvasSpec::toy();
        for seed in 0..20 {
            let s = gen_syndot(spec, 10, 2, seed).unwrap();
            let mut patches: Vec<usize> = s.centers.iter().map(|c| spec.patch_of(c.0, c.1)).collect();
            for (c, p) in s.centers.iter().zip(&patches) {
                assert_eq!(spec.patch_center(*p), *c);
            }
            patches.sort();
            patches.dedup();
            assert_eq!(patches.len(), 10);
        }
    }

    #[test]
    fn synpoly_single_object() {
        let s = gen_synpoly(CanvasSpec::toy(), 1, 3, 5).unwrap();
        assert_eq!(s.count, 1);
        assert_eq!(s.attributes.len(), 1);
    }

    #[test]
    fn synpoly_raster_matches_point_in_polygon_oracle() {
        let spec = CanvasSpec::large();
        let s = gen_synpoly(spec, 3, 8, 11).unwrap();
        let n = spec.canvas_px;
        let mut checked = 0;
        for (c, a) in s.centers.iter().zip(&s.attributes) {
            let sides = a.shape.sides().unwrap();
            assert!((3..=6).contains(&sides));
            let poly = regular_vertices(sides, *c, a.radius_px, a.rotation);
            let rgb = a.color.rgb();
            for y in 0..n {
                for x in 0..n {
                    let p = (x as f64 + 0.5, y as f64 + 0.5);
                    if (p.0 - c.0).abs() > 2.0 * a.radius_px || (p.1 - c.1).abs() > 2.0 * a.radius_px {
                        continue;
                    }
                    let Some(inside) = crossing_inside(&poly, p, 1e-9) else { continue };
                    let painted = (0..3).all(|ch| s.image.get(x, y, ch) == rgb[ch]);
                    assert_eq!(inside, painted, "pixel ({x},{y}) of a {sides}-gon");
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn pair_prefix_property() {
        let spec = CanvasSpec::toy();
        let p = make_pair(spec, SceneKind::SynDot, 2, 3, 5, 42).unwrap();
        assert_eq!(&p.corrupted.centers[..3], &p.clean.centers[..]);
        let q = make_pair(spec, SceneKind::SynDot, 2, 5, 3, 42).unwrap();
        assert_eq!(&q.clean.centers[..3], &q.corrupted.centers[..]);
        let r = make_pair(spec, SceneKind::SynPoly, 3, 2, 4, 9).unwrap();
        assert_eq!(&r.corrupted.attributes[..2], &r.clean.attributes[..]);
        assert!(matches!(
            make_pair(spec, SceneKind::SynDot, 2, 3, 3, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn scatter_objects_do_not_touch() {
        let spec = CanvasSpec::toy();
        for seed in 0..10 {
            let s = gen_scatter(spec, 4, 6, 9, seed).unwrap();
            assert_eq!(components(&s.image), 4);
            for &(x, y) in &s.centers {
                assert!(x > 0.0 && y > 0.0 && x < 64.0 && y < 64.0);
            }
        }
    }

    #[test]
    fn colorshape_has_one_object_and_matching_label() {
        let vocab = crate::vocab::Vocab;
        for seed in 0..50 {
            let (scene, rec) = gen_colorshape(CanvasSpec::toy(), seed).unwrap();
            assert_eq!(scene.count, 1);
            let a = scene.attributes[0];
            let want = match rec.task {
                Task::Color => a.color.name(),
                Task::Shape => a.shape.name(),
                ref t => panic!("unexpected task {t:?}"),
            };
            assert_eq!(rec.answer, vec![vocab.expect(want)]);
        }
    }

    #[test]
    fn balanced_colorshape_has_equal_cells() {
        let items = gen_colorshape_balanced(CanvasSpec::toy(), 2, 5).unwrap();
        assert_eq!(items.len(), 160);
        let mut counts = std::collections::HashMap::new();
        for (s, _) in &items {
            *counts.entry((s.attributes[0].color, s.attributes[0].shape)).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 80);
        assert!(counts.values().all(|&c| c == 2));
    }
}
