//! Contour-FFT tabulation of layered MBF reactions.
//!
//! On the extended contour k = k_R(1 + iγ) the reaction integral becomes
//!
//! Z(Δ) = 1/(4π²) ∬ (1+iγ)² H(k_R(1+iγ)) e^{γ k_R·Δ} e^{-i k_R·Δ} d²k_R,
//!
//! and expanding e^{γ k_R·Δ} in a Taylor series turns every term into a plain
//! 2D Fourier transform of γ^p k_x^a k_y^b (1+iγ)² H, weighted at lookup time
//! by Δx^a Δy^b / (a! b!).

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par};
use num_complex::Complex64 as C;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::mbf::{ConjugationPattern, MbfSet};
use crate::quadrature::{lagrange3, next_pow2};
use crate::spectral::{ContourSpec, SpectralGreens, SubstrateSpec};

/// Largest accepted points per dimension before zero-padding.
pub const DEFAULT_SIZE_CAP: usize = 4096;

/// Regular spectral grid k(i) = -k_max + i·Δk, i = 0..n, and its conjugate
/// spatial grid with half-extent x_m = π/Δk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralGrid {
    pub n: usize,
    pub k_max: f64,
    pub dk: f64,
    pub x_m: f64,
}

impl SpectralGrid {
    pub fn new(n: usize, k_max: f64) -> Result<Self> {
        if n < 2 || n % 2 != 0 || !(k_max > 0.0) {
            return Err(Error::InvalidSpec(format!("grid needs an even size >= 2 and k_max > 0, got n={n}, k_max={k_max}")));
        }
        let dk = 2.0 * k_max / n as f64;
        Ok(SpectralGrid { n, k_max, dk, x_m: PI / dk })
    }

    /// Wavenumber of sample `i` (0-based).
    pub fn k_at(&self, i: usize) -> f64 {
        -self.k_max + i as f64 * self.dk
    }

    /// Inverse of [`k_at`](Self::k_at) for grid-aligned wavenumbers.
    pub fn k_index(&self, k: f64) -> Option<usize> {
        let t = (k + self.k_max) / self.dk;
        let i = t.round();
        ((t - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < self.n).then_some(i as usize)
    }

    /// FFT length per dimension with padding factor `pad`.
    pub fn fft_len(&self, pad: usize) -> usize {
        self.n * pad
    }

    /// Spatial step of the tables: π/k_max unpadded, halved by 2× padding.
    pub fn x_step(&self, pad: usize) -> f64 {
        2.0 * PI / (self.fft_len(pad) as f64 * self.dk)
    }

    /// Position of spatial sample `j` (0-based) on the padded grid.
    pub fn x_at(&self, j: usize, pad: usize) -> f64 {
        -self.x_m + j as f64 * self.x_step(pad)
    }

    pub fn x_index(&self, x: f64, pad: usize) -> Option<usize> {
        let t = (x + self.x_m) / self.x_step(pad);
        let j = t.round();
        ((t - j).abs() < 1e-6 && j >= 0.0 && (j as usize) < self.fft_len(pad)).then_some(j as usize)
    }
}

/// Grid for tables covering |Δx|, |Δy| ≤ d_max with oversampling `s`.
///
/// The size is the next power of two of ρ = 10·S·√εr·d_max/λ0, raised when
/// needed so that the conjugate half-extent π/Δk covers d_max.
pub fn build_spectral_grid(d_max: f64, substrate: &SubstrateSpec, s: f64, beta_max: f64, cap: usize) -> Result<SpectralGrid> {
    if !(d_max >= 0.0) || !(s >= 1.0) {
        return Err(Error::InvalidSpec(format!("d_max {d_max} must be >= 0 and oversampling {s} >= 1")));
    }
    let rho = sizing_rho(d_max, substrate, s);
    let coverage = 2.0 * beta_max * d_max / PI;
    let n = next_pow2(rho.max(coverage).max(2.0));
    if n > cap {
        return Err(Error::SizeCap { n, cap });
    }
    SpectralGrid::new(n, beta_max)
}

/// ρ = 10·S·√εr·d_max/λ0.
pub fn sizing_rho(d_max: f64, substrate: &SubstrateSpec, s: f64) -> f64 {
    10.0 * s * substrate.eps_r.sqrt() * d_max / substrate.lambda0()
}

/// Monomials (a, b) with a + b ≤ order, in the order 1, x, y, x², xy, y², …
pub fn monomials(order: usize) -> Vec<(usize, usize)> {
    (0..=order).flat_map(|p| (0..=p).map(move |b| (p - b, b))).collect()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Sampled zero-order kernel Ĩ_Mf of one MBF pair plus the Taylor data
/// needed to form every monomial kernel γ^p k_x^a k_y^b Ĩ_Mf.
#[derive(Debug, Clone)]
pub struct TaylorKernelSet {
    pub grid: SpectralGrid,
    pub order: usize,
    pub gamma: f64,
    /// Ĩ_Mf at (k(ix), k(iy)), stored at ix·n + iy, alternating sign applied.
    pub base: Vec<C>,
}

impl TaylorKernelSet {
    /// Kernel set from a function of the real grid wavenumbers; the
    /// alternating sign is applied here.
    pub fn from_fn(grid: SpectralGrid, order: usize, gamma: f64, f: impl Fn(f64, f64) -> C) -> Self {
        let n = grid.n;
        let mut base = Vec::with_capacity(n * n);
        for ix in 0..n {
            for iy in 0..n {
                let s = if (ix + iy) % 2 == 0 { 1.0 } else { -1.0 };
                base.push(f(grid.k_at(ix), grid.k_at(iy)) * s);
            }
        }
        TaylorKernelSet { grid, order, gamma, base }
    }

    pub fn len(&self) -> usize {
        (self.order + 1) * (self.order + 2) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn monomials(&self) -> Vec<(usize, usize)> {
        monomials(self.order)
    }

    /// Row `ix` of monomial kernel `m`.
    fn row_into(&self, m: (usize, usize), ix: usize, out: &mut [C]) {
        let n = self.grid.n;
        let (a, b) = m;
        let gp = self.gamma.powi((a + b) as i32);
        let kxa = self.grid.k_at(ix).powi(a as i32) * gp;
        let row = &self.base[ix * n..(ix + 1) * n];
        if b == 0 {
            for (o, v) in out.iter_mut().zip(row) {
                *o = v * kxa;
            }
        } else {
            for (iy, (o, v)) in out.iter_mut().zip(row).enumerate() {
                *o = v * (kxa * self.grid.k_at(iy).powi(b as i32));
            }
        }
    }

    /// Monomial kernel `m` as a full n×n array (ix-major).
    pub fn kernel(&self, m: usize) -> Vec<C> {
        let mono = self.monomials()[m];
        let n = self.grid.n;
        let mut out = vec![C::new(0.0, 0.0); n * n];
        for ix in 0..n {
            self.row_into(mono, ix, &mut out[ix * n..(ix + 1) * n]);
        }
        out
    }
}

/// Samples pair kernels on a grid, caching MBF spectra and the dyadic.
pub struct KernelSampler<'a> {
    pub grid: SpectralGrid,
    pub contour: ContourSpec,
    pub pattern: ConjugationPattern,
    set_t: &'a MbfSet,
    set_b: &'a MbfSet,
    /// Dyadic (xx, xy, yy) at ix·n + iy; zero outside the disc.
    dyadic: [Vec<C>; 3],
    inside: Vec<bool>,
    basis: Vec<Option<[Mat<C>; 2]>>,
    testing: Option<(usize, [Mat<C>; 2])>,
}

impl<'a> KernelSampler<'a> {
    pub fn new(greens: &SpectralGreens, contour: ContourSpec, grid: SpectralGrid, set_t: &'a MbfSet, set_b: &'a MbfSet) -> Result<Self> {
        let n = grid.n;
        let f = contour.factor();
        let mut dyadic = [vec![C::new(0.0, 0.0); n * n], vec![C::new(0.0, 0.0); n * n], vec![C::new(0.0, 0.0); n * n]];
        let mut inside = vec![false; n * n];
        let b2 = contour.beta_max * contour.beta_max;
        for ix in 0..n {
            let kx = grid.k_at(ix);
            for iy in 0..n {
                let ky = grid.k_at(iy);
                if kx * kx + ky * ky > b2 {
                    continue;
                }
                let g = greens.green_spectral(f * kx, f * ky)?;
                let p = ix * n + iy;
                dyadic[0][p] = g.xx;
                dyadic[1][p] = g.xy;
                dyadic[2][p] = g.yy;
                inside[p] = true;
            }
        }
        Ok(KernelSampler {
            grid,
            contour,
            pattern: ConjugationPattern::TestingSide,
            set_t,
            set_b,
            dyadic,
            inside,
            basis: vec![None; set_b.num_mbfs()],
            testing: None,
        })
    }

    /// (x, y) spectra of MBF `j` on the extended grid as (iy, ix) matrices.
    fn grid_spectra(&self, set: &MbfSet, j: usize, conj: bool, reflect: bool) -> [Mat<C>; 2] {
        let n = self.grid.n;
        let f = self.contour.factor();
        let s = if reflect { -1.0 } else { 1.0 };
        let ks: Vec<C> = (0..n).map(|i| f * (s * self.grid.k_at(i))).collect();
        let sp = &set.spectra;
        let xf = sp.x_factor_matrix(&ks);
        let yf = sp.y_factor_matrix(&ks);
        let mut out = [Mat::<C>::zeros(n, n), Mat::<C>::zeros(n, n)];
        for (comp, o) in out.iter_mut().enumerate() {
            let mut coef = Mat::<C>::zeros(sp.y_factors.len(), sp.x_factors.len());
            for (r, &(c, ix, iy)) in sp.map.iter().enumerate() {
                if c == comp {
                    coef[(iy, ix)] += if conj { set.q[(r, j)].conj() } else { set.q[(r, j)] };
                }
            }
            let ycoef = &yf * &coef;
            matmul(o.as_mut(), Accum::Replace, ycoef.as_ref(), xf.transpose(), C::new(1.0, 0.0), Par::Seq);
        }
        out
    }

    /// Ĩ_Mf for MBF pair (i on the testing set, j on the basis set).
    pub fn sample(&mut self, i: usize, j: usize, order: usize) -> Result<TaylorKernelSet> {
        if i >= self.set_t.num_mbfs() {
            return Err(Error::IndexOutOfRange { index: i, len: self.set_t.num_mbfs() });
        }
        if j >= self.set_b.num_mbfs() {
            return Err(Error::IndexOutOfRange { index: j, len: self.set_b.num_mbfs() });
        }
        let (ct, rt, cb, rb) = match self.pattern {
            ConjugationPattern::TestingSide => (true, true, false, false),
            ConjugationPattern::BasisSide => (false, false, true, true),
        };
        if self.testing.as_ref().map(|t| t.0) != Some(i) {
            self.testing = Some((i, self.grid_spectra(self.set_t, i, ct, rt)));
        }
        if self.basis[j].is_none() {
            self.basis[j] = Some(self.grid_spectra(self.set_b, j, cb, rb));
        }
        let [tx, ty] = &self.testing.as_ref().expect("testing spectra cached").1;
        let [bx, by] = self.basis[j].as_ref().expect("basis spectra cached");
        let n = self.grid.n;
        let f2 = self.contour.factor() * self.contour.factor();
        let mut base = vec![C::new(0.0, 0.0); n * n];
        for ix in 0..n {
            for iy in 0..n {
                let p = ix * n + iy;
                if !self.inside[p] {
                    continue;
                }
                let (gxx, gxy, gyy) = (self.dyadic[0][p], self.dyadic[1][p], self.dyadic[2][p]);
                let (fbx, fby) = (bx[(iy, ix)], by[(iy, ix)]);
                let h = tx[(iy, ix)] * (gxx * fbx + gxy * fby) + ty[(iy, ix)] * (gxy * fbx + gyy * fby);
                let s = if (ix + iy) % 2 == 0 { 1.0 } else { -1.0 };
                base[p] = f2 * h * s;
            }
        }
        Ok(TaylorKernelSet { grid: self.grid, order, gamma: self.contour.gamma, base })
    }
}

/// Convenience wrapper sampling one pair without reusing spectra.
#[allow(clippy::too_many_arguments)]
pub fn sample_kernels(
    greens: &SpectralGreens,
    contour: ContourSpec,
    grid: SpectralGrid,
    set_t: &MbfSet,
    set_b: &MbfSet,
    pair: (usize, usize),
    order: usize,
) -> Result<TaylorKernelSet> {
    KernelSampler::new(greens, contour, grid, set_t, set_b)?.sample(pair.0, pair.1, order)
}

/// Options for [`cfft_tabulate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabulateOptions {
    /// Zero-padding factor (1 or 2).
    pub pad: usize,
    /// Half-extent kept in the tables; `None` keeps the full period.
    pub cover: Option<f64>,
}

impl Default for TabulateOptions {
    fn default() -> Self {
        TabulateOptions { pad: 2, cover: None }
    }
}

/// Space-domain tables of one MBF pair, one grid per Taylor monomial.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTable {
    pub order: usize,
    /// Samples per dimension.
    pub len: usize,
    pub spacing: f64,
    /// Coordinate of sample 0 in both dimensions.
    pub origin: f64,
    /// Largest |Δx|, |Δy| accepted by lookups.
    pub valid: f64,
    /// Per monomial, y-index-major samples.
    pub grids: Vec<Vec<C>>,
}

/// Interpolation weights for one query, reusable across tables with the
/// same layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    base: usize,
    w: [[f64; 3]; 2],
    mono: [f64; 10],
    count: usize,
    pub near_edge: bool,
}

impl InteractionTable {
    pub fn num_monomials(&self) -> usize {
        self.grids.len()
    }

    /// Sample at grid indices (x index, y index) of monomial `m`.
    pub fn at(&self, m: usize, jx: usize, jy: usize) -> C {
        self.grids[m][jy * self.len + jx]
    }

    /// Weights for a query at (dx, dy) using Taylor terms up to `order_used`.
    pub fn stencil(&self, dx: f64, dy: f64, order_used: usize) -> Result<Stencil> {
        if order_used > self.order || order_used > 3 {
            return Err(Error::OrderExceeded { requested: order_used, stored: self.order.min(3) });
        }
        // Quantized offsets may round just past the edge; kept samples extend
        // two steps beyond it.
        let limit = self.valid + 1e-9;
        if !(dx.abs() <= limit && dy.abs() <= limit) {
            return Err(Error::OutOfRange { dx, dy, x_m: self.valid, y_m: self.valid });
        }
        let locate = |x: f64| {
            let t = (x - self.origin) / self.spacing;
            let i = (t.round() as isize).clamp(1, self.len as isize - 2) as usize;
            (i, t - i as f64)
        };
        let (ix, tx) = locate(dx);
        let (iy, ty) = locate(dy);
        let near_edge = tx.abs() > 0.5 + 1e-9 || ty.abs() > 0.5 + 1e-9 || ix <= 1 || iy <= 1 || ix + 2 >= self.len || iy + 2 >= self.len;
        let mut mono = [0.0; 10];
        let count = (order_used + 1) * (order_used + 2) / 2;
        for (m, &(a, b)) in monomials(order_used).iter().enumerate() {
            mono[m] = dx.powi(a as i32) * dy.powi(b as i32) / (factorial(a) * factorial(b));
        }
        Ok(Stencil { base: (iy - 1) * self.len + (ix - 1), w: [lagrange3(ty), lagrange3(tx)], mono, count, near_edge })
    }

    /// Interpolated reaction for a precomputed stencil.
    #[inline]
    pub fn apply(&self, s: &Stencil) -> C {
        let mut total = C::new(0.0, 0.0);
        for (m, grid) in self.grids.iter().enumerate().take(s.count) {
            let mut v = C::new(0.0, 0.0);
            for a in 0..3 {
                let row = &grid[s.base + a * self.len..s.base + a * self.len + 3];
                v += (row[0] * s.w[1][0] + row[1] * s.w[1][1] + row[2] * s.w[1][2]) * s.w[0][a];
            }
            total += v * s.mono[m];
        }
        total
    }
}

/// Second-order interpolated reaction at (dx, dy) with Taylor terms up to
/// `order_used`.
pub fn lookup_interaction(table: &InteractionTable, dx: f64, dy: f64, order_used: usize) -> Result<C> {
    Ok(table.apply(&table.stencil(dx, dy, order_used)?))
}

/// (−i)^{len mod 4}: the constant phase e^{-iπ·len/2} of the index maps.
fn constant_phase(len: usize) -> C {
    [C::new(1.0, 0.0), C::new(0.0, -1.0), C::new(-1.0, 0.0), C::new(0.0, 1.0)][len % 4]
}

/// One 2D FFT per monomial kernel, scaled by Δk²/(4π²) with the output sign
/// and constant phase of the index maps. Only the rows carrying data are
/// transformed along y, and only the kept columns along x.
const COL_BLOCK: usize = 32;

thread_local! {
    /// Row-transform buffer, kept between calls.
    static WORK: std::cell::RefCell<Vec<C>> = const { std::cell::RefCell::new(Vec::new()) };
}

pub fn cfft_tabulate(kernels: &TaylorKernelSet, opts: TabulateOptions) -> Result<InteractionTable> {
    let grid = kernels.grid;
    if opts.pad != 1 && opts.pad != 2 {
        return Err(Error::InvalidSpec(format!("padding factor must be 1 or 2, got {}", opts.pad)));
    }
    let n = grid.n;
    let len = grid.fft_len(opts.pad);
    let step = grid.x_step(opts.pad);
    let half = len / 2;
    let keep = match opts.cover {
        Some(c) => ((c / step).ceil() as usize + 2).min(half - 1),
        None => half - 1,
    };
    let valid = opts.cover.unwrap_or(f64::INFINITY).min((keep - 1) as f64 * step);
    let (j0, out_len) = (half - keep, 2 * keep + 1);
    let offset = (len - n) / 2;
    let fft: std::sync::Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(len);
    let mut scratch = vec![C::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let ph = constant_phase(len);
    let scale = ph * ph * (grid.dk * grid.dk / (4.0 * PI * PI));
    // (−1)^offset per dimension cancels between the two dimensions.
    let mut grids = Vec::with_capacity(kernels.len());
    WORK.with_borrow_mut(|work| {
        work.resize(n * len, C::new(0.0, 0.0));
        let mut cols = vec![C::new(0.0, 0.0); COL_BLOCK * len];
        for mono in kernels.monomials() {
            for ix in 0..n {
                let line = &mut work[ix * len..(ix + 1) * len];
                line[..offset].fill(C::new(0.0, 0.0));
                line[offset + n..].fill(C::new(0.0, 0.0));
                kernels.row_into(mono, ix, &mut line[offset..offset + n]);
                fft.process_with_scratch(line, &mut scratch);
            }
            let mut out = Vec::with_capacity(out_len * out_len);
            let mut jy = j0;
            while jy < j0 + out_len {
                let nb = COL_BLOCK.min(j0 + out_len - jy);
                let cols = &mut cols[..nb * len];
                cols.fill(C::new(0.0, 0.0));
                for ix in 0..n {
                    for (b, v) in work[ix * len + jy..ix * len + jy + nb].iter().enumerate() {
                        cols[b * len + offset + ix] = *v;
                    }
                }
                for (b, col) in cols.chunks_exact_mut(len).enumerate() {
                    fft.process_with_scratch(col, &mut scratch);
                    let s = if (j0 + jy + b) % 2 == 0 { scale } else { -scale };
                    out.extend(col[j0..j0 + out_len].iter().enumerate().map(|(i, v)| if i % 2 == 0 { v * s } else { -v * s }));
                }
                jy += nb;
            }
            if out.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                return Err(Error::InvalidSpec("non-finite table entry".into()));
            }
            grids.push(out);
        }
        Ok(InteractionTable { order: kernels.order, len: out_len, spacing: step, origin: grid.x_at(j0, opts.pad), valid, grids })
    })
}

/// Tables refined by 2× spectral zero-padding (half the spatial step).
pub fn refine_zero_pad(kernels: &TaylorKernelSet, cover: Option<f64>, cap: usize) -> Result<InteractionTable> {
    if kernels.grid.n > cap {
        return Err(Error::SizeCap { n: kernels.grid.n, cap });
    }
    cfft_tabulate(kernels, TabulateOptions { pad: 2, cover })
}

/// Settings of a C-FFT tabulation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfftConfig {
    pub order: usize,
    pub oversampling: f64,
    pub size_cap: usize,
    pub pad: usize,
}

impl Default for CfftConfig {
    fn default() -> Self {
        CfftConfig { order: 3, oversampling: 3.0, size_cap: DEFAULT_SIZE_CAP, pad: 2 }
    }
}

/// Time split of a tabulation run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TabulationTiming {
    pub sampling: Duration,
    pub fft: Duration,
}

/// Tabulates every MBF pair in turn and hands each table to `sink`, so only
/// one pair's tables are alive at a time. Pairs arrive as (i, j) with i on
/// the testing set, row-major.
#[allow(clippy::too_many_arguments)]
pub fn tabulate_pairs(
    greens: &SpectralGreens,
    contour: ContourSpec,
    grid: SpectralGrid,
    set_t: &MbfSet,
    set_b: &MbfSet,
    cfg: &CfftConfig,
    cover: f64,
    mut sink: impl FnMut(usize, usize, InteractionTable) -> Result<()>,
) -> Result<TabulationTiming> {
    let mut timing = TabulationTiming::default();
    let t0 = Instant::now();
    let mut sampler = KernelSampler::new(greens, contour, grid, set_t, set_b)?;
    timing.sampling += t0.elapsed();
    let opts = TabulateOptions { pad: cfg.pad, cover: Some(cover) };
    for i in 0..set_t.num_mbfs() {
        for j in 0..set_b.num_mbfs() {
            let t = Instant::now();
            let k = sampler.sample(i, j, cfg.order)?;
            timing.sampling += t.elapsed();
            let t = Instant::now();
            let table = cfft_tabulate(&k, opts)?;
            timing.fft += t.elapsed();
            sink(i, j, table)?;
        }
    }
    Ok(timing)
}
