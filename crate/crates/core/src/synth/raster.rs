//! Filled-shape rasterization by pixel-centre sampling.

use std::f64::consts::PI;

use super::{ObjectAttributes, Shape};

const STAR_INNER: f64 = 0.45;
const DIAMOND_ASPECT: f64 = 0.6;

/// Outline of a shape as a closed vertex loop, or `None` for the circle.
pub fn vertices(shape: Shape, center: (f64, f64), radius: f64, rotation: f64) -> Option<Vec<(f64, f64)>> {
    let (cx, cy) = center;
    let polar = |r: f64, theta: f64| (cx + r * theta.cos(), cy + r * theta.sin());
    let regular = |n: usize| {
        (0..n)
            .map(|k| polar(radius, rotation + 2.0 * PI * k as f64 / n as f64))
            .collect::<Vec<_>>()
    };
    match shape {
        Shape::Circle => None,
        Shape::Star => Some(
            (0..10)
                .map(|k| {
                    let r = if k % 2 == 0 { radius } else { radius * STAR_INNER };
                    polar(r, rotation + PI * k as f64 / 5.0)
                })
                .collect(),
        ),
        Shape::Diamond => {
            let (s, c) = rotation.sin_cos();
            let local = [
                (0.0, -radius),
                (radius * DIAMOND_ASPECT, 0.0),
                (0.0, radius),
                (-radius * DIAMOND_ASPECT, 0.0),
            ];
            Some(
                local
                    .iter()
                    .map(|(x, y)| (cx + x * c - y * s, cy + x * s + y * c))
                    .collect(),
            )
        }
        other => Some(regular(other.sides().expect("regular polygon"))),
    }
}

/// Non-zero winding number of `poly` around `p`.
fn winding_number(poly: &[(f64, f64)], p: (f64, f64)) -> i32 {
    let mut wn = 0;
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let cross = (b.0 - a.0) * (p.1 - a.1) - (p.0 - a.0) * (b.1 - a.1);
        if a.1 <= p.1 {
            if b.1 > p.1 && cross > 0.0 {
                wn += 1;
            }
        } else if b.1 <= p.1 && cross < 0.0 {
            wn -= 1;
        }
    }
    wn
}

/// Calls `f(x, y)` for every pixel whose centre lies inside the object.
pub fn for_each_covered_pixel(
    canvas_px: usize,
    center: (f64, f64),
    attr: &ObjectAttributes,
    mut f: impl FnMut(usize, usize),
) {
    let r = attr.radius_px;
    let lo = |v: f64| ((v - r - 1.0).floor().max(0.0)) as usize;
    let hi = |v: f64| ((v + r + 1.0).ceil().max(0.0) as usize).min(canvas_px);
    let poly = vertices(attr.shape, center, r, attr.rotation);
    for y in lo(center.1)..hi(center.1) {
        for x in lo(center.0)..hi(center.0) {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = match &poly {
                None => {
                    let (dx, dy) = (p.0 - center.0, p.1 - center.1);
                    dx * dx + dy * dy <= r * r
                }
                Some(v) => winding_number(v, p) != 0,
            };
            if inside {
                f(x, y);
            }
        }
    }
}
