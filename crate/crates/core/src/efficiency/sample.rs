use alloc::vec::Vec;

use rand::Rng;

use super::{Geometry, NetworkEncoding};

/// Allowed widths of a layer with full width `max_width`: multiples of
/// `max(1, C/32)` from `ceil(C/10)` to `C`.
pub fn width_grid(max_width: usize) -> Vec<usize> {
    let step = (max_width / 32).max(1);
    let lo = max_width.div_ceil(10).max(1);
    (1..=max_width / step).map(|k| k * step).filter(|&w| w >= lo).collect()
}

/// Draws `n` encodings; each gated layer's width is uniform over its
/// [`width_grid`], ungated layers stay at full width.
pub fn sample_encodings<R: Rng + ?Sized>(geometry: &Geometry, n: usize, rng: &mut R) -> Vec<NetworkEncoding> {
    let grids: Vec<Option<Vec<usize>>> = geometry
        .layers
        .iter()
        .map(|l| l.gated.then(|| width_grid(l.max_width)))
        .collect();
    (0..n)
        .map(|_| {
            let counts = geometry
                .layers
                .iter()
                .zip(&grids)
                .map(|(l, grid)| match grid {
                    Some(grid) => grid[rng.random_range(0..grid.len())],
                    None => l.max_width,
                })
                .collect();
            NetworkEncoding {
                geometry: geometry.clone(),
                counts,
            }
        })
        .collect()
}
