//! Inputs shared by the tabulation benchmarks.

use cfft_mbf::c64;
use cfft_mbf::cfft::{SpectralGrid, TaylorKernelSet};

/// Spectral extent used by every benchmark grid (rad/m).
pub const K_MAX: f64 = 3750.0;

/// Smooth kernel with a Gaussian envelope and a plane-wave phase, sampled on
/// an `n`×`n` grid.
pub fn synthetic_kernels(n: usize, order: usize) -> TaylorKernelSet {
    let grid = SpectralGrid::new(n, K_MAX).expect("even grid size");
    TaylorKernelSet::from_fn(grid, order, 1.0 / 130.0, |kx, ky| {
        let env = (-(kx * kx + ky * ky) / (K_MAX * K_MAX)).exp();
        c64::from_polar(env, 0.01 * kx - 0.02 * ky)
    })
}
