use super::{CanvasSpec, RenderedScene};

/// Soft instance prior over image patches: a Gaussian bump of width
/// `sigma` (in patch units) around every object centre, normalized to sum
/// to one. Scenes without objects get the uniform distribution.
pub fn focus_prior(scene: &RenderedScene, spec: CanvasSpec, sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let g = spec.grid();
    let n = spec.n_patches();
    if scene.centers.is_empty() {
        return vec![1.0 / n as f64; n];
    }
    let centers: Vec<(f64, f64)> = scene
        .centers
        .iter()
        .map(|&(x, y)| spec.to_patch_coords(x, y))
        .collect();
    let two_s2 = 2.0 * sigma * sigma;
    let mut u: Vec<f64> = (0..n)
        .map(|p| {
            let (col, row) = ((p % g) as f64, (p / g) as f64);
            centers
                .iter()
                .map(|&(cx, cy)| (-((col - cx).powi(2) + (row - cy).powi(2)) / two_s2).exp())
                .sum()
        })
        .collect();
    let total: f64 = u.iter().sum();
    if total > 0.0 && total.is_finite() {
        u.iter_mut().for_each(|v| *v /= total);
        u
    } else {
        // every centre is so far off-grid that all weights underflowed
        vec![1.0 / n as f64; n]
    }
}
