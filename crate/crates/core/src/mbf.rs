//! Macro basis functions: generation, spectral transforms, and the
//! traditional reduced blocks (direct contour integration and self blocks).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex, OnceLock};

use faer::linalg::matmul::matmul;
use faer::linalg::solvers::Solve;
use faer::{Accum, Mat, Par};
use num_complex::Complex64 as C;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::geometry::{ElementMesh, Fnv};
use crate::homog::{elementary_homog_block, HomogKernel, HomogReducer, MomentRule};
use crate::quadrature::{bessel_j_into, bisect_breakpoints, graded_breakpoints, next_pow2, panels};
use crate::spectral::{rooftop_ft, ContourSpec, Dyadic, Extraction, RooftopSpectra, SpectralGreens};

/// Which side of a reaction carries the conjugated coefficients and the
/// reflected wavenumber.
///
/// `TestingSide` uses Σ conj(Q_ti) F_t(-k) on the testing side and
/// Σ Q_bj F_b(k) on the basis side, which reproduces Qᴴ Z Q.
/// `BasisSide` places the conjugate on the basis transform instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConjugationPattern {
    #[default]
    TestingSide,
    BasisSide,
}

/// Role of a transform in a reaction integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Testing,
    Basis,
}

/// MBF coefficients over the rooftops of one element type.
#[derive(Debug, Clone)]
pub struct MbfSet {
    /// B×M coefficient matrix.
    pub q: Mat<C>,
    pub mesh: Arc<ElementMesh>,
    pub spectra: Arc<RooftopSpectra>,
    x_rows: Vec<usize>,
    y_rows: Vec<usize>,
}

impl MbfSet {
    pub fn from_matrix(mesh: Arc<ElementMesh>, q: Mat<C>) -> Result<Self> {
        if q.nrows() != mesh.num_rooftops() || q.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "Q is {}x{}, mesh has {} rooftops",
                q.nrows(),
                q.ncols(),
                mesh.num_rooftops()
            )));
        }
        let spectra = Arc::new(RooftopSpectra::new(&mesh));
        let x_rows = (0..spectra.len()).filter(|&r| spectra.map[r].0 == 0).collect();
        let y_rows = (0..spectra.len()).filter(|&r| spectra.map[r].0 == 1).collect();
        Ok(MbfSet { q, mesh, spectra, x_rows, y_rows })
    }

    pub fn num_mbfs(&self) -> usize {
        self.q.ncols()
    }

    pub fn num_rooftops(&self) -> usize {
        self.q.nrows()
    }

    /// Basis-side transform Σ_r Q_rj F_r(k).
    pub fn mbf_ft(&self, j: usize, kx: C, ky: C) -> Result<[C; 2]> {
        self.transform(j, kx, ky, Side::Basis)
    }

    /// Testing-side transform Σ_r conj(Q_rj) F_r(-k).
    pub fn mbf_ft_testing(&self, j: usize, kx: C, ky: C) -> Result<[C; 2]> {
        self.transform(j, kx, ky, Side::Testing)
    }

    fn transform(&self, j: usize, kx: C, ky: C, side: Side) -> Result<[C; 2]> {
        if j >= self.num_mbfs() {
            return Err(Error::IndexOutOfRange { index: j, len: self.num_mbfs() });
        }
        let (kx, ky) = if side == Side::Testing { (-kx, -ky) } else { (kx, ky) };
        let mut out = [C::new(0.0, 0.0); 2];
        for (r, b) in self.mesh.rooftops.iter().enumerate() {
            let q = if side == Side::Testing { self.q[(r, j)].conj() } else { self.q[(r, j)] };
            let d = b.direction.index();
            out[d] += q * rooftop_ft(b, kx, ky)[d];
        }
        Ok(out)
    }

    /// Transforms of all MBFs at a list of wavenumbers: (x, y) matrices of
    /// size points × M. `conj_coeffs` and `reflect` select the side.
    pub fn spectra_at(&self, pts: &[(C, C)], conj_coeffs: bool, reflect: bool) -> [Mat<C>; 2] {
        let s = if reflect { -1.0 } else { 1.0 };
        let rows = |idx: &[usize]| {
            Mat::from_fn(idx.len(), self.num_mbfs(), |i, j| {
                let v = self.q[(idx[i], j)];
                if conj_coeffs {
                    v.conj()
                } else {
                    v
                }
            })
        };
        let (qx, qy) = (rows(&self.x_rows), rows(&self.y_rows));
        let (fx, fy) = rooftop_spectra_split(&self.spectra, pts, s, &self.x_rows, &self.y_rows);
        [&fx * &qx, &fy * &qy]
    }

    /// π = Qᵀ p: port current per unit MBF coefficient.
    pub fn port_projection(&self) -> Vec<C> {
        let p = self.mesh.port_vector();
        (0..self.num_mbfs())
            .map(|j| p.iter().enumerate().map(|(r, &w)| self.q[(r, j)] * w).sum())
            .collect()
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::default();
        self.mesh.content_hash().hash(&mut h);
        for j in 0..self.q.ncols() {
            for i in 0..self.q.nrows() {
                self.q[(i, j)].re.to_bits().hash(&mut h);
                self.q[(i, j)].im.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Rooftop spectra at `s·k` split into x- and y-directed columns.
fn rooftop_spectra_split(sp: &RooftopSpectra, pts: &[(C, C)], s: f64, xr: &[usize], yr: &[usize]) -> (Mat<C>, Mat<C>) {
    let mut fx = Mat::<C>::zeros(pts.len(), xr.len());
    let mut fy = Mat::<C>::zeros(pts.len(), yr.len());
    let (mut bx, mut by) = (Vec::new(), Vec::new());
    let mut vals = vec![C::new(0.0, 0.0); sp.len()];
    for (i, &(kx, ky)) in pts.iter().enumerate() {
        sp.eval(kx * s, ky * s, &mut bx, &mut by, &mut vals);
        for (c, &r) in xr.iter().enumerate() {
            fx[(i, c)] = vals[r];
        }
        for (c, &r) in yr.iter().enumerate() {
            fy[(i, c)] = vals[r];
        }
    }
    (fx, fy)
}

/// Quadrature controls for polar spectral integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadSpec {
    /// Minimum number of α samples (raised to cover the spectra's bandwidth).
    pub alpha_samples: usize,
    pub gl_order: usize,
    /// Radial panels per k0 at least.
    pub panels_per_k0: f64,
    /// Largest phase β·ρ swept by one radial panel.
    pub phase_per_panel: f64,
    pub check_convergence: bool,
    /// Return from β_max(1+iγ) to β_max along a vertical segment, which makes
    /// the truncated integral independent of γ.
    pub close_contour: bool,
}

impl Default for QuadSpec {
    fn default() -> Self {
        QuadSpec { alpha_samples: 64, gl_order: 32, panels_per_k0: 1.0, phase_per_panel: 20.0, check_convergence: true, close_contour: true }
    }
}

/// Radial breakpoints on [0, β_max] graded toward k0, surface-wave poles,
/// k_eff and k_d.
pub fn radial_breakpoints(greens: &SpectralGreens, contour: &ContourSpec, rho_eff: f64, quad: &QuadSpec) -> Vec<f64> {
    let s = greens.substrate;
    let lossless = SpectralGreens { substrate: crate::SubstrateSpec { loss_tangent: 0.0, ..s }, ..*greens };
    let mut sing = vec![s.k0(), s.kd()];
    sing.extend(lossless.locate_surface_wave_poles());
    if greens.extraction == Extraction::HomogeneousImage {
        sing.push(greens.k_eff());
    }
    let rel = if contour.gamma > 0.0 { contour.gamma.abs() / 4.0 } else { 1e-7 };
    let sing: Vec<(f64, f64)> = sing.into_iter().map(|b| (b, (rel * b).max(1e-9 * b))).collect();
    let mut max_w = s.k0() / quad.panels_per_k0;
    if rho_eff > 0.0 {
        max_w = max_w.min(quad.phase_per_panel / rho_eff);
    }
    graded_breakpoints(contour.beta_max, &sing, max_w)
}

/// Radial integration path: complex nodes β and weights dβ.
#[derive(Debug, Clone)]
pub struct RadialPath {
    pub beta: Vec<C>,
    pub dbeta: Vec<C>,
}

/// Nodes along the deformed ray up to β_max and, when closing, down the
/// segment to the real axis. `refine` halves every panel.
pub fn radial_path(greens: &SpectralGreens, contour: &ContourSpec, rho_eff: f64, quad: &QuadSpec, refine: bool) -> RadialPath {
    let mut bps = radial_breakpoints(greens, contour, rho_eff, quad);
    if refine {
        bps = bisect_breakpoints(&bps);
    }
    let f = contour.factor();
    let ray = panels(&bps, quad.gl_order);
    let mut beta: Vec<C> = ray.nodes.iter().map(|&b| f * b).collect();
    let mut dbeta: Vec<C> = ray.weights.iter().map(|&w| f * w).collect();
    let height = contour.gamma * contour.beta_max;
    if quad.close_contour && height != 0.0 {
        let mut width = height.abs();
        if rho_eff > 0.0 {
            width = width.min(quad.phase_per_panel / rho_eff);
        }
        let count = (height.abs() / width).ceil().max(1.0) as usize * if refine { 2 } else { 1 };
        let seg: Vec<f64> = (0..=count).map(|i| height * i as f64 / count as f64).collect();
        let seg = panels(&seg, quad.gl_order);
        for (&t, &w) in seg.nodes.iter().zip(&seg.weights) {
            beta.push(C::new(contour.beta_max, t));
            dbeta.push(C::new(0.0, -w));
        }
    }
    RadialPath { beta, dbeta }
}

/// B×B layered reaction matrix between two copies of an element, the test
/// copy at `delta` from the basis copy, by polar quadrature with adaptive
/// trapezoid rules in α.
pub fn layered_elementary_block(
    mesh: &ElementMesh,
    greens: &SpectralGreens,
    contour: &ContourSpec,
    delta: [f64; 2],
    quad: &QuadSpec,
) -> Result<Mat<C>> {
    let sp = RooftopSpectra::new(mesh);
    let xr: Vec<usize> = (0..sp.len()).filter(|&r| sp.map[r].0 == 0).collect();
    let yr: Vec<usize> = (0..sp.len()).filter(|&r| sp.map[r].0 == 1).collect();
    let rho = delta[0].hypot(delta[1]);
    let span = 2.0 * mesh.radius() + rho;
    let path = radial_path(greens, contour, span, quad, false);

    // Flattened (k, weight) samples.
    let mut pts = Vec::new();
    let mut wts = Vec::new();
    for (&bc, &w) in path.beta.iter().zip(&path.dbeta) {
        let na = (2.0 * (bc.norm() * span).ceil() + 24.0).max(quad.alpha_samples as f64) as usize;
        let na = na.div_ceil(4) * 4;
        let wa = w * 2.0 * PI / na as f64 / (4.0 * PI * PI);
        for k in 0..na {
            let a = 2.0 * PI * k as f64 / na as f64;
            let kv = (bc * a.cos(), bc * a.sin());
            pts.push(kv);
            let phase = (-C::i() * (kv.0 * delta[0] + kv.1 * delta[1])).exp();
            wts.push(bc * wa * phase);
        }
    }
    let n = mesh.num_rooftops();
    let mut z = Mat::<C>::zeros(n, n);
    let (nx, ny) = (xr.len(), yr.len());
    let mut zxx = Mat::<C>::zeros(nx, nx);
    let mut zxy = Mat::<C>::zeros(nx, ny);
    let mut zyx = Mat::<C>::zeros(ny, nx);
    let mut zyy = Mat::<C>::zeros(ny, ny);
    const CHUNK: usize = 4096;
    for (cp, cw) in pts.chunks(CHUNK).zip(wts.chunks(CHUNK)) {
        let (tx, ty) = rooftop_spectra_split(&sp, cp, -1.0, &xr, &yr);
        let (bx, by) = rooftop_spectra_split(&sp, cp, 1.0, &xr, &yr);
        let mut g: Vec<Dyadic> = Vec::with_capacity(cp.len());
        for &(kx, ky) in cp {
            g.push(greens.green_spectral(kx, ky)?);
        }
        let scale = |m: &Mat<C>, pick: &dyn Fn(&Dyadic) -> C| {
            Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * pick(&g[i]) * cw[i])
        };
        let bxx = scale(&bx, &|d| d.xx);
        let bxy = scale(&by, &|d| d.xy);
        let byx = scale(&bx, &|d| d.xy);
        let byy = scale(&by, &|d| d.yy);
        let one = C::new(1.0, 0.0);
        matmul(zxx.as_mut(), Accum::Add, tx.transpose(), bxx.as_ref(), one, Par::Seq);
        matmul(zxy.as_mut(), Accum::Add, tx.transpose(), bxy.as_ref(), one, Par::Seq);
        matmul(zyx.as_mut(), Accum::Add, ty.transpose(), byx.as_ref(), one, Par::Seq);
        matmul(zyy.as_mut(), Accum::Add, ty.transpose(), byy.as_ref(), one, Par::Seq);
    }
    for (a, &i) in xr.iter().enumerate() {
        for (b, &j) in xr.iter().enumerate() {
            z[(i, j)] = zxx[(a, b)];
        }
        for (b, &j) in yr.iter().enumerate() {
            z[(i, j)] = zxy[(a, b)];
        }
    }
    for (a, &i) in yr.iter().enumerate() {
        for (b, &j) in xr.iter().enumerate() {
            z[(i, j)] = zyx[(a, b)];
        }
        for (b, &j) in yr.iter().enumerate() {
            z[(i, j)] = zyy[(a, b)];
        }
    }
    Ok(z)
}

/// Layered reaction of every rooftop (testing, at `delta`) with a given
/// basis current vector.
fn layered_reaction_vector(
    mesh: &ElementMesh,
    greens: &SpectralGreens,
    contour: &ContourSpec,
    delta: [f64; 2],
    current: &[C],
    quad: &QuadSpec,
) -> Result<Vec<C>> {
    let single = MbfSet::from_matrix(Arc::new(mesh.clone()), Mat::from_fn(current.len(), 1, |i, _| current[i]))?;
    let sp = &single.spectra;
    let xr = &single.x_rows;
    let yr = &single.y_rows;
    let rho = delta[0].hypot(delta[1]);
    let span = 2.0 * mesh.radius() + rho;
    let path = radial_path(greens, contour, span, quad, false);
    let mut out = vec![C::new(0.0, 0.0); current.len()];
    for (&bc, &w) in path.beta.iter().zip(&path.dbeta) {
        let na = (2.0 * (bc.norm() * span).ceil() + 24.0).max(quad.alpha_samples as f64) as usize;
        let wa = w * 2.0 * PI / na as f64 / (4.0 * PI * PI);
        let pts: Vec<(C, C)> = (0..na)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / na as f64;
                (bc * a.cos(), bc * a.sin())
            })
            .collect();
        let [mx, my] = single.spectra_at(&pts, false, false);
        let (tx, ty) = rooftop_spectra_split(sp, &pts, -1.0, xr, yr);
        for (p, &(kx, ky)) in pts.iter().enumerate() {
            let g = greens.green_spectral(kx, ky)?;
            let wt = bc * wa * (-C::i() * (kx * delta[0] + ky * delta[1])).exp();
            let ex = (g.xx * mx[(p, 0)] + g.xy * my[(p, 0)]) * wt;
            let ey = (g.xy * mx[(p, 0)] + g.yy * my[(p, 0)]) * wt;
            for (c, &r) in xr.iter().enumerate() {
                out[r] += tx[(p, c)] * ex;
            }
            for (c, &r) in yr.iter().enumerate() {
                out[r] += ty[(p, c)] * ey;
            }
        }
    }
    Ok(out)
}

/// Single-element model: mesh, kernels and the elementary self matrix.
pub struct ElementModel {
    pub mesh: Arc<ElementMesh>,
    pub greens: SpectralGreens,
    pub homog: HomogKernel,
    /// Contour used for inter-element reactions.
    pub contour: ContourSpec,
    /// Spectral truncation used for the self matrix.
    pub self_beta_max: f64,
    pub load: f64,
    pub quad: QuadSpec,
    z_elem: OnceLock<Mat<C>>,
}

impl ElementModel {
    pub fn new(mesh: Arc<ElementMesh>, greens: SpectralGreens, contour: ContourSpec) -> Self {
        ElementModel {
            mesh,
            homog: HomogKernel::new(&greens),
            self_beta_max: 20.0 * greens.substrate.kd(),
            greens,
            contour,
            load: 50.0,
            quad: QuadSpec::default(),
            z_elem: OnceLock::new(),
        }
    }

    /// Elementary self matrix (layered + homogeneous), unloaded; computed once.
    pub fn z_elem(&self) -> Result<&Mat<C>> {
        if let Some(z) = self.z_elem.get() {
            return Ok(z);
        }
        let c = ContourSpec { beta_max: self.self_beta_max, ..self.contour };
        let mut z = layered_elementary_block(&self.mesh, &self.greens, &c, [0.0, 0.0], &self.quad)?;
        if self.greens.extraction == Extraction::HomogeneousImage {
            z += elementary_homog_block(&self.homog, &self.mesh, [0.0, 0.0], &MomentRule::default());
        }
        Ok(self.z_elem.get_or_init(|| z))
    }

    pub fn is_assembled(&self) -> bool {
        self.z_elem.get().is_some()
    }

    /// Self matrix plus the port load Z_L p pᵀ.
    pub fn z_loaded(&self) -> Result<Mat<C>> {
        let mut z = self.z_elem()?.clone();
        let p = self.mesh.port_vector();
        for &(i, wi) in &self.mesh.port.rooftops {
            for &(j, _) in &self.mesh.port.rooftops {
                z[(i, j)] += C::new(self.load * wi * p[j], 0.0);
            }
        }
        Ok(z)
    }

    /// Full reaction (layered + homogeneous) of every rooftop of a test copy
    /// at `delta` with a current on the basis copy.
    pub fn coupled_reaction(&self, current: &[C], delta: [f64; 2]) -> Result<Vec<C>> {
        let mut v = layered_reaction_vector(&self.mesh, &self.greens, &self.contour, delta, current, &self.quad)?;
        if self.greens.extraction == Extraction::HomogeneousImage {
            let zh = elementary_homog_block(&self.homog, &self.mesh, delta, &MomentRule::default());
            for (i, vi) in v.iter_mut().enumerate() {
                *vi += (0..current.len()).map(|j| zh[(i, j)] * current[j]).sum::<C>();
            }
        }
        Ok(v)
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::default();
        self.mesh.content_hash().hash(&mut h);
        self.greens.substrate.content_hash().hash(&mut h);
        self.greens.eps_eff.to_bits().hash(&mut h);
        self.contour.gamma.to_bits().hash(&mut h);
        self.contour.beta_max.to_bits().hash(&mut h);
        self.self_beta_max.to_bits().hash(&mut h);
        h.finish()
    }
}

fn solve_vec(lu: &faer::linalg::solvers::PartialPivLu<C>, v: &[C]) -> Vec<C> {
    let b = Mat::from_fn(v.len(), 1, |i, _| v[i]);
    let x = lu.solve(&b);
    (0..v.len()).map(|i| x[(i, 0)]).collect()
}

/// Offsets of the eight neighbours used for secondaries.
pub fn neighbor_ring(spacing: f64) -> [[f64; 2]; 8] {
    let s = spacing;
    [[s, 0.0], [-s, 0.0], [0.0, s], [0.0, -s], [s, s], [-s, s], [s, -s], [-s, -s]]
}

/// Primary and secondaries with orthonormalized coefficients.
///
/// `secondaries` is 0 or 8. The loaded isolated element is solved once for
/// the unit delta-gap excitation (primary) and once per neighbour position for
/// the negated reaction of the primary placed there.
pub fn generate_mbfs(model: &ElementModel, spacing: f64, secondaries: usize) -> Result<MbfSet> {
    if secondaries != 0 && secondaries != 8 {
        return Err(Error::InvalidSpec(format!("secondaries must be 0 or 8, got {secondaries}")));
    }
    let z = model.z_loaded()?;
    let lu = z.partial_piv_lu();
    let p = model.mesh.port_vector();
    let v: Vec<C> = p.iter().map(|&w| C::new(w, 0.0)).collect();
    let primary = solve_vec(&lu, &v);
    let mut cols = vec![primary.clone()];
    for pos in neighbor_ring(spacing).iter().take(secondaries) {
        let r = model.coupled_reaction(&primary, [-pos[0], -pos[1]])?;
        let rhs: Vec<C> = r.iter().map(|x| -x).collect();
        cols.push(solve_vec(&lu, &rhs));
    }
    let q = orthonormalize(&cols)?;
    MbfSet::from_matrix(model.mesh.clone(), q)
}

/// Modified Gram–Schmidt with one reorthogonalization pass; errors if adding
/// a column drops the singular value ratio below 1e-8.
pub fn orthonormalize(cols: &[Vec<C>]) -> Result<Mat<C>> {
    let n = cols[0].len();
    for k in 1..cols.len() {
        let m = Mat::from_fn(n, k + 1, |i, j| {
            let nrm: f64 = cols[j].iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            cols[j][i] / nrm
        });
        let sv = m.singular_values().map_err(|_| Error::RankDeficient { secondary: k - 1, ratio: 0.0 })?;
        let (smax, smin) = sv.iter().fold((0.0f64, f64::MAX), |(a, b), &s| (a.max(s), b.min(s)));
        let ratio = smin / smax;
        if !(ratio >= 1e-8) {
            return Err(Error::RankDeficient { secondary: k - 1, ratio });
        }
    }
    let mut q: Vec<Vec<C>> = Vec::with_capacity(cols.len());
    for c in cols {
        let mut v = c.clone();
        for _ in 0..2 {
            for u in &q {
                let d: C = u.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= d * y;
                }
            }
        }
        let nrm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= nrm);
        q.push(v);
    }
    Ok(Mat::from_fn(n, q.len(), |i, j| q[j][i]))
}

/// An M×M reduced block.
#[derive(Debug, Clone)]
pub struct ReducedBlock {
    pub values: Mat<C>,
    pub offset: [f64; 2],
    pub converged: bool,
}

/// Reference integrator for reduced layered blocks along the deformed contour.
#[derive(Debug, Clone, Copy)]
pub struct DirectIntegrator {
    pub greens: SpectralGreens,
    pub contour: ContourSpec,
    pub quad: QuadSpec,
    pub pattern: ConjugationPattern,
}

/// Angular Fourier coefficients of the MBF-pair integrands on a radial node
/// set; blocks at any offset up to the design radius follow by Jacobi–Anger
/// summation.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    beta: Vec<C>,
    weight: Vec<C>,
    /// Largest |m| kept per node.
    band: Vec<usize>,
    /// First row of each node in `coeffs`; rows run over m = -band..=band.
    row_start: Vec<usize>,
    m_t: usize,
    m_b: usize,
    /// Rows: (node, harmonic); columns: MBF pair i·M_b + j.
    coeffs: Mat<C>,
}

impl DirectIntegrator {
    pub fn new(greens: SpectralGreens, contour: ContourSpec) -> Self {
        DirectIntegrator { greens, contour, quad: QuadSpec::default(), pattern: ConjugationPattern::TestingSide }
    }

    /// Angular sample count for a pair of sets.
    fn harmonics(&self, set_t: &MbfSet, set_b: &MbfSet) -> usize {
        let bmax = self.contour.factor().norm() * self.contour.beta_max;
        let band = bmax * (set_t.mesh.radius() + set_b.mesh.radius()) + 16.0;
        next_pow2(2.0 * band).max(self.quad.alpha_samples)
    }

    /// Samples the pair integrands on the radial nodes for offsets up to `rho_max`.
    pub fn prepare(&self, set_t: &MbfSet, set_b: &MbfSet, rho_max: f64) -> Result<PreparedPair> {
        let span = set_t.mesh.radius() + set_b.mesh.radius() + rho_max;
        self.prepare_on(set_t, set_b, &radial_path(&self.greens, &self.contour, span, &self.quad, false))
    }

    fn prepare_on(&self, set_t: &MbfSet, set_b: &MbfSet, path: &RadialPath) -> Result<PreparedPair> {
        let p = self.harmonics(set_t, set_b);
        let (m_t, m_b) = (set_t.num_mbfs(), set_b.num_mbfs());
        let npair = m_t * m_b;
        let reach = set_t.mesh.radius() + set_b.mesh.radius();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(p);
        let nnodes = path.beta.len();
        let beta = path.beta.clone();
        let weight: Vec<C> = (0..nnodes).map(|n| path.dbeta[n] * beta[n] * (2.0 * PI) / (4.0 * PI * PI)).collect();
        let band: Vec<usize> = beta.iter().map(|b| ((b.norm() * reach).ceil() as usize + 16).min(p / 2 - 1)).collect();
        let mut row_start = Vec::with_capacity(nnodes + 1);
        let mut rows = 0;
        for &b in &band {
            row_start.push(rows);
            rows += 2 * b + 1;
        }
        row_start.push(rows);
        let mut coeffs = Mat::<C>::zeros(rows, npair);
        let cs: Vec<(f64, f64)> = (0..p).map(|k| (2.0 * PI * k as f64 / p as f64).sin_cos()).collect();
        let nodes_per_chunk = (4096 / p).max(1);
        let mut line = vec![C::new(0.0, 0.0); p];
        for chunk_start in (0..nnodes).step_by(nodes_per_chunk) {
            let chunk = chunk_start..(chunk_start + nodes_per_chunk).min(nnodes);
            let mut pts = Vec::with_capacity(chunk.len() * p);
            for n in chunk.clone() {
                for &(s, c) in &cs {
                    pts.push((beta[n] * c, beta[n] * s));
                }
            }
            let (t, b) = match self.pattern {
                ConjugationPattern::TestingSide => (set_t.spectra_at(&pts, true, true), set_b.spectra_at(&pts, false, false)),
                ConjugationPattern::BasisSide => (set_t.spectra_at(&pts, false, false), set_b.spectra_at(&pts, true, true)),
            };
            let mut h = vec![C::new(0.0, 0.0); pts.len() * npair];
            for (q, &(kx, ky)) in pts.iter().enumerate() {
                let g = self.greens.green_spectral(kx, ky)?;
                for j in 0..m_b {
                    let gx = g.xx * b[0][(q, j)] + g.xy * b[1][(q, j)];
                    let gy = g.xy * b[0][(q, j)] + g.yy * b[1][(q, j)];
                    for i in 0..m_t {
                        h[q * npair + i * m_b + j] = t[0][(q, i)] * gx + t[1][(q, i)] * gy;
                    }
                }
            }
            for (ci, n) in chunk.enumerate() {
                let bn = band[n] as i64;
                for pair in 0..npair {
                    for (k, l) in line.iter_mut().enumerate() {
                        *l = h[(ci * p + k) * npair + pair];
                    }
                    fft.process(&mut line);
                    for m in -bn..=bn {
                        let k = m.rem_euclid(p as i64) as usize;
                        coeffs[(row_start[n] + (m + bn) as usize, pair)] = line[k] / p as f64;
                    }
                }
            }
        }
        Ok(PreparedPair { beta, weight, band, row_start, m_t, m_b, coeffs })
    }

    /// Layered block only, with the panel-doubling convergence check when enabled.
    pub fn layered_block(&self, set_t: &MbfSet, set_b: &MbfSet, dx: f64, dy: f64) -> Result<ReducedBlock> {
        let rho = dx.hypot(dy);
        let span = set_t.mesh.radius() + set_b.mesh.radius() + rho;
        let coarse = self.prepare_on(set_t, set_b, &radial_path(&self.greens, &self.contour, span, &self.quad, false))?.block(dx, dy);
        if !self.quad.check_convergence {
            return Ok(ReducedBlock { values: coarse, offset: [dx, dy], converged: true });
        }
        let fine = self.prepare_on(set_t, set_b, &radial_path(&self.greens, &self.contour, span, &self.quad, true))?.block(dx, dy);
        let converged = (&fine - &coarse).norm_max() <= 1e-4 * fine.norm_max();
        Ok(ReducedBlock { values: fine, offset: [dx, dy], converged })
    }

    /// Full reduced block: layered part plus, when the kernel is extracted,
    /// the homogeneous part.
    pub fn reduce_block_direct(
        &self,
        set_t: &MbfSet,
        set_b: &MbfSet,
        dx: f64,
        dy: f64,
        homog: Option<&HomogReducer>,
    ) -> Result<ReducedBlock> {
        let mut block = self.layered_block(set_t, set_b, dx, dy)?;
        if self.greens.extraction == Extraction::HomogeneousImage {
            let h = match homog {
                Some(h) => h.reduce_homog(dx, dy),
                None => HomogReducer::new(HomogKernel::new(&self.greens), set_t, set_b).reduce_homog(dx, dy),
            };
            block.values += h;
        }
        Ok(block)
    }
}

impl PreparedPair {
    pub fn num_nodes(&self) -> usize {
        self.beta.len()
    }

    /// Layered M_t×M_b block at offset (dx, dy) = test - basis position.
    pub fn block(&self, dx: f64, dy: f64) -> Mat<C> {
        self.blocks(&[[dx, dy]]).pop().expect("one offset in, one block out")
    }

    /// Blocks at several offsets.
    pub fn blocks(&self, offsets: &[[f64; 2]]) -> Vec<Mat<C>> {
        self.sum_harmonics(offsets, false).into_iter().map(|(a, _)| a).collect()
    }

    /// Blocks at Δ and -Δ for each offset; they share all Bessel values and
    /// differ only in the sign of the odd harmonics.
    pub fn blocks_pm(&self, offsets: &[[f64; 2]]) -> Vec<(Mat<C>, Mat<C>)> {
        self.sum_harmonics(offsets, true)
    }

    fn sum_harmonics(&self, offsets: &[[f64; 2]], split: bool) -> Vec<(Mat<C>, Mat<C>)> {
        const BATCH: usize = 32;
        const ROWS_PER_CHUNK: usize = 8192;
        let npair = self.m_t * self.m_b;
        let per = if split { 2 } else { 1 };
        let mi_pow = [C::new(1.0, 0.0), C::new(0.0, -1.0), C::new(-1.0, 0.0), C::new(0.0, 1.0)];
        let max_band = self.band.iter().copied().max().unwrap_or(0);
        let mut out = Vec::with_capacity(offsets.len());
        let mut jbuf = vec![C::new(0.0, 0.0); max_band + 1];
        for batch in offsets.chunks(BATCH) {
            let rot: Vec<Vec<C>> = batch
                .iter()
                .map(|d| {
                    let phi = d[1].atan2(d[0]);
                    (0..=max_band).map(|m| C::from_polar(1.0, m as f64 * phi)).collect()
                })
                .collect();
            let mut acc = Mat::<C>::zeros(per * batch.len(), npair);
            let mut n0 = 0;
            while n0 < self.beta.len() {
                let mut n1 = n0 + 1;
                while n1 < self.beta.len() && self.row_start[n1 + 1] - self.row_start[n0] <= ROWS_PER_CHUNK {
                    n1 += 1;
                }
                let (r0, r1) = (self.row_start[n0], self.row_start[n1]);
                let mut fac = Mat::<C>::zeros(per * batch.len(), r1 - r0);
                for (b, d) in batch.iter().enumerate() {
                    let rho = d[0].hypot(d[1]);
                    for n in n0..n1 {
                        let bn = self.band[n];
                        let j = &mut jbuf[..=bn];
                        if rho == 0.0 {
                            j.iter_mut().for_each(|v| *v = C::new(0.0, 0.0));
                            j[0] = C::new(1.0, 0.0);
                        } else {
                            bessel_j_into(self.beta[n] * rho, j);
                        }
                        let base = self.row_start[n] - r0 + bn;
                        for am in 0..=bn {
                            let v = self.weight[n] * mi_pow[am % 4] * j[am];
                            let row = per * b + if split { am % 2 } else { 0 };
                            fac[(row, base + am)] = v * rot[b][am];
                            if am > 0 {
                                fac[(row, base - am)] = v * rot[b][am].conj();
                            }
                        }
                    }
                }
                matmul(acc.as_mut(), Accum::Add, fac.as_ref(), self.coeffs.subrows(r0, r1 - r0), C::new(1.0, 0.0), Par::Seq);
                n0 = n1;
            }
            for b in 0..batch.len() {
                let row = |r: usize| Mat::from_fn(self.m_t, self.m_b, |i, j| acc[(r, i * self.m_b + j)]);
                if split {
                    let (e, o) = (row(2 * b), row(2 * b + 1));
                    out.push((&e + &o, &e - &o));
                } else {
                    out.push((row(b), Mat::new()));
                }
            }
        }
        out
    }
}

/// Cache of reduced self blocks keyed by element model and MBF set.
#[derive(Default)]
pub struct SelfBlockCache {
    map: Mutex<HashMap<(u64, u64), Mat<C>>>,
}

impl SelfBlockCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Qᴴ Z_elem Q; the elementary matrix is integrated only on a miss.
    pub fn self_block_traditional(&self, model: &ElementModel, set: &MbfSet) -> Result<ReducedBlock> {
        let key = (model.content_hash(), set.content_hash());
        if let Some(m) = self.map.lock().expect("self-block cache poisoned").get(&key) {
            return Ok(ReducedBlock { values: m.clone(), offset: [0.0, 0.0], converged: true });
        }
        let z = model.z_elem()?;
        let values = set.q.adjoint() * (z * &set.q);
        self.map.lock().expect("self-block cache poisoned").insert(key, values.clone());
        Ok(ReducedBlock { values, offset: [0.0, 0.0], converged: true })
    }
}
