//! Reduced-system assembly for array layouts, solution, port currents and
//! radiation patterns.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use faer::linalg::solvers::Solve;
use faer::Mat;
use num_complex::Complex64 as C;

use crate::cfft::{
    cfft_tabulate, lookup_interaction, tabulate_pairs, CfftConfig, InteractionTable, KernelSampler, SpectralGrid, Stencil, TabulateOptions,
    TabulationTiming,
};
use crate::error::{Error, Result};
use crate::geometry::ArrayLayout;
use crate::homog::HomogReducer;
use crate::mbf::{MbfSet, PreparedPair};
use crate::spectral::{ContourSpec, SpectralGreens, SubstrateSpec};

/// Port voltages driving the array.
#[derive(Debug, Clone, PartialEq)]
pub enum Excitation {
    /// Unit volt at one element, all others loaded.
    Single(usize),
    /// Unit volt at every element.
    Uniform,
    /// Complex volts per element.
    Weights(Vec<C>),
}

impl Excitation {
    pub fn voltages(&self, n: usize) -> Result<Vec<C>> {
        match self {
            Excitation::Single(e) if *e < n => {
                let mut v = vec![C::new(0.0, 0.0); n];
                v[*e] = C::new(1.0, 0.0);
                Ok(v)
            }
            Excitation::Single(e) => Err(Error::IndexOutOfRange { index: *e, len: n }),
            Excitation::Uniform => Ok(vec![C::new(1.0, 0.0); n]),
            Excitation::Weights(w) if w.len() == n => Ok(w.clone()),
            Excitation::Weights(w) => Err(Error::DimensionMismatch(format!("{} weights for {n} elements", w.len()))),
        }
    }
}

fn quantize(v: f64) -> i64 {
    (v * 1e12).round() as i64
}

/// Ordered element pairs grouped by their quantized offset X_e - X_f.
#[derive(Debug, Clone)]
pub struct OffsetIndex {
    /// Distinct offsets; equal offsets map to bit-identical values.
    pub offsets: Vec<[f64; 2]>,
    /// (test element e, basis element f, offset index) for every e ≠ f.
    pub pairs: Vec<(u32, u32, u32)>,
    /// Index of -offsets[i], when present.
    pub negated: Vec<Option<usize>>,
}

impl OffsetIndex {
    pub fn new(layout: &ArrayLayout) -> Self {
        let mut keys: HashMap<(i64, i64), u32> = HashMap::new();
        let mut offsets = Vec::new();
        let mut pairs = Vec::with_capacity(layout.len() * layout.len().saturating_sub(1));
        for (e, pe) in layout.positions.iter().enumerate() {
            for (f, pf) in layout.positions.iter().enumerate() {
                if e == f {
                    continue;
                }
                let k = (quantize(pe[0] - pf[0]), quantize(pe[1] - pf[1]));
                let idx = *keys.entry(k).or_insert_with(|| {
                    offsets.push([k.0 as f64 * 1e-12, k.1 as f64 * 1e-12]);
                    (offsets.len() - 1) as u32
                });
                pairs.push((e as u32, f as u32, idx));
            }
        }
        let negated = offsets.iter().map(|o| keys.get(&(-quantize(o[0]), -quantize(o[1]))).map(|&i| i as usize)).collect();
        OffsetIndex { offsets, pairs, negated }
    }

    /// Offsets split into ± pairs: (index of Δ, index of -Δ if present), each
    /// offset appearing once.
    pub fn pm_groups(&self) -> Vec<(usize, Option<usize>)> {
        let mut seen = vec![false; self.offsets.len()];
        let mut out = Vec::new();
        for i in 0..self.offsets.len() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            let n = self.negated[i].filter(|&n| !seen[n]);
            if let Some(n) = n {
                seen[n] = true;
            }
            out.push((i, n));
        }
        out
    }

    /// Adds `blocks[offset]` into the M_t×M_b block of every ordered pair.
    fn scatter(&self, z: &mut Mat<C>, blocks: &[Mat<C>]) {
        for &(e, f, idx) in &self.pairs {
            let b = &blocks[idx as usize];
            let (r0, c0) = (e as usize * b.nrows(), f as usize * b.ncols());
            for j in 0..b.ncols() {
                for i in 0..b.nrows() {
                    z[(r0 + i, c0 + j)] += b[(i, j)];
                }
            }
        }
    }
}

/// Source of layered inter-element blocks.
pub trait LayeredBlocks {
    /// Adds the layered block of every ordered pair e ≠ f to `z`.
    fn add_to(&mut self, index: &OffsetIndex, layout: &ArrayLayout, m: usize, z: &mut Mat<C>) -> Result<()>;
}

/// Traditional MBF path: every distinct offset integrated on the contour.
pub struct DirectBlocks<'a> {
    pub pair: &'a PreparedPair,
}

impl LayeredBlocks for DirectBlocks<'_> {
    fn add_to(&mut self, index: &OffsetIndex, _layout: &ArrayLayout, _m: usize, z: &mut Mat<C>) -> Result<()> {
        let groups = index.pm_groups();
        let offs: Vec<[f64; 2]> = groups.iter().map(|&(i, _)| index.offsets[i]).collect();
        let mut blocks: Vec<Option<Mat<C>>> = vec![None; index.offsets.len()];
        for ((i, n), (plus, minus)) in groups.into_iter().zip(self.pair.blocks_pm(&offs)) {
            blocks[i] = Some(plus);
            if let Some(n) = n {
                blocks[n] = Some(minus);
            }
        }
        let blocks: Vec<Mat<C>> = blocks.into_iter().map(|b| b.expect("every offset filled")).collect();
        index.scatter(z, &blocks);
        Ok(())
    }
}

/// Tables for every MBF pair, delivered one pair at a time.
pub trait TableSource {
    /// (M_t, M_b).
    fn dims(&self) -> (usize, usize);
    fn for_each(&mut self, f: &mut dyn FnMut(usize, usize, &InteractionTable) -> Result<()>) -> Result<()>;
}

/// Tables held in memory, row-major over (i, j).
pub struct MemoryTables {
    pub m_t: usize,
    pub m_b: usize,
    pub tables: Vec<InteractionTable>,
}

impl TableSource for MemoryTables {
    fn dims(&self) -> (usize, usize) {
        (self.m_t, self.m_b)
    }

    fn for_each(&mut self, f: &mut dyn FnMut(usize, usize, &InteractionTable) -> Result<()>) -> Result<()> {
        for (p, t) in self.tables.iter().enumerate() {
            f(p / self.m_b, p % self.m_b, t)?;
        }
        Ok(())
    }
}

/// Tables tabulated on demand and dropped after use.
pub struct ComputedTables<'a> {
    pub greens: SpectralGreens,
    pub contour: ContourSpec,
    pub grid: SpectralGrid,
    pub set: &'a MbfSet,
    pub cfg: CfftConfig,
    /// Half-extent the tables must cover.
    pub cover: f64,
    pub timing: TabulationTiming,
}

impl TableSource for ComputedTables<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.set.num_mbfs(), self.set.num_mbfs())
    }

    fn for_each(&mut self, f: &mut dyn FnMut(usize, usize, &InteractionTable) -> Result<()>) -> Result<()> {
        let t = tabulate_pairs(&self.greens, self.contour, self.grid, self.set, self.set, &self.cfg, self.cover, |i, j, table| f(i, j, &table))?;
        self.timing.sampling += t.sampling;
        self.timing.fft += t.fft;
        Ok(())
    }
}

/// C-FFT path: one interpolated lookup per MBF pair and distinct offset.
pub struct CfftBlocks<S> {
    pub source: S,
    pub order_used: usize,
    /// Time spent in lookups and scattering, tabulation excluded.
    pub fill_time: Duration,
}

impl<S: TableSource> CfftBlocks<S> {
    pub fn new(source: S, order_used: usize) -> Self {
        CfftBlocks { source, order_used, fill_time: Duration::ZERO }
    }
}

impl<S: TableSource> LayeredBlocks for CfftBlocks<S> {
    fn add_to(&mut self, index: &OffsetIndex, layout: &ArrayLayout, m: usize, z: &mut Mat<C>) -> Result<()> {
        let (m_t, m_b) = self.source.dims();
        if m_t != m || m_b != m {
            return Err(Error::DimensionMismatch(format!("tables are {m_t}x{m_b}, system uses {m} MBFs")));
        }
        let order = self.order_used;
        let d_max = layout.d_max();
        let mut stencils: Option<Vec<Stencil>> = None;
        let mut values = vec![C::new(0.0, 0.0); index.offsets.len()];
        let mut fill = Duration::ZERO;
        self.source.for_each(&mut |i, j, table| {
            let t0 = Instant::now();
            if stencils.is_none() {
                if d_max > table.valid {
                    return Err(Error::Coverage { d_max, valid: table.valid });
                }
                stencils = Some(index.offsets.iter().map(|o| table.stencil(o[0], o[1], order)).collect::<Result<_>>()?);
            }
            let st = stencils.as_ref().expect("stencils built");
            for (v, s) in values.iter_mut().zip(st) {
                *v = table.apply(s);
            }
            for &(e, f, idx) in &index.pairs {
                z[(e as usize * m + i, f as usize * m + j)] += values[idx as usize];
            }
            fill += t0.elapsed();
            Ok(())
        })?;
        self.fill_time += fill;
        Ok(())
    }
}

/// Element-independent ingredients of the reduced system.
pub struct AssemblyParts<'a> {
    pub set: &'a MbfSet,
    /// Qᴴ Z_elem Q, unloaded.
    pub self_block: &'a Mat<C>,
    /// Homogeneous part; `None` when the kernel is not extracted.
    pub homog: Option<&'a HomogReducer>,
    /// Port load (ohm).
    pub load: f64,
}

/// Wall time per assembly stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AssemblyTiming {
    pub homogeneous: Duration,
    pub layered: Duration,
    pub total: Duration,
}

/// Reduced MoM system Z' c = V' of an array.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub z: Mat<C>,
    pub v: Vec<C>,
    pub num_mbfs: usize,
    pub num_elements: usize,
    pub load: f64,
    /// πⱼ = pᵀ Q[:, j]: port current carried by unit MBF j.
    pub port: Vec<C>,
    pub timing: AssemblyTiming,
}

/// Builds Z' and V' for a layout.
///
/// Diagonal blocks are the self block plus Z_L conj(π) πᵀ; off-diagonal
/// blocks are the layered blocks from `layered` plus the homogeneous blocks.
pub fn assemble_reduced(
    layout: &ArrayLayout,
    parts: &AssemblyParts<'_>,
    layered: &mut dyn LayeredBlocks,
    excitation: &Excitation,
) -> Result<ReducedSystem> {
    let t0 = Instant::now();
    let m = parts.set.num_mbfs();
    let a = layout.len();
    if parts.self_block.nrows() != m || parts.self_block.ncols() != m {
        return Err(Error::DimensionMismatch(format!("self block is {}x{}, set has {m} MBFs", parts.self_block.nrows(), parts.self_block.ncols())));
    }
    let volts = excitation.voltages(a)?;
    let port = parts.set.port_projection();
    let mut z = Mat::<C>::zeros(m * a, m * a);
    for e in 0..a {
        for j in 0..m {
            for i in 0..m {
                z[(e * m + i, e * m + j)] = parts.self_block[(i, j)] + port[i].conj() * port[j] * parts.load;
            }
        }
    }
    let index = OffsetIndex::new(layout);
    let mut timing = AssemblyTiming::default();
    if let Some(h) = parts.homog {
        let t = Instant::now();
        let mut blocks: Vec<Option<Mat<C>>> = vec![None; index.offsets.len()];
        for (i, n) in index.pm_groups() {
            let o = index.offsets[i];
            match n {
                Some(n) => {
                    let (p, q) = h.reduce_homog_pm(o[0], o[1]);
                    blocks[i] = Some(p);
                    blocks[n] = Some(q);
                }
                None => blocks[i] = Some(h.reduce_homog(o[0], o[1])),
            }
        }
        let blocks: Vec<Mat<C>> = blocks.into_iter().map(|b| b.expect("every offset filled")).collect();
        index.scatter(&mut z, &blocks);
        timing.homogeneous = t.elapsed();
    }
    let t = Instant::now();
    if a > 1 {
        layered.add_to(&index, layout, m, &mut z)?;
    }
    timing.layered = t.elapsed();
    if z.col_iter().any(|c| c.iter().any(|v| !v.re.is_finite() || !v.im.is_finite())) {
        return Err(Error::InvalidSpec("non-finite entry in the reduced matrix".into()));
    }
    let mut v = vec![C::new(0.0, 0.0); m * a];
    for (e, ve) in volts.iter().enumerate() {
        for j in 0..m {
            v[e * m + j] = port[j].conj() * ve;
        }
    }
    timing.total = t0.elapsed();
    Ok(ReducedSystem { z, v, num_mbfs: m, num_elements: a, load: parts.load, port, timing })
}

/// Solved MBF coefficients and port currents.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// Element-major coefficients, M per element.
    pub coeffs: Vec<C>,
    pub port_currents: Vec<C>,
    pub num_mbfs: usize,
}

impl Solution {
    pub fn element_coeffs(&self, e: usize) -> &[C] {
        &self.coeffs[e * self.num_mbfs..(e + 1) * self.num_mbfs]
    }
}

/// Dense LU solve; port current I_e = πᵀ c_e.
pub fn solve_and_port_currents(sys: &ReducedSystem) -> Result<Solution> {
    let n = sys.z.nrows();
    if n == 0 || sys.v.len() != n {
        return Err(Error::DimensionMismatch(format!("matrix {n}x{n}, rhs {}", sys.v.len())));
    }
    let lu = sys.z.partial_piv_lu();
    let u = lu.U();
    let (mut hi, mut lo) = (0.0f64, f64::INFINITY);
    for i in 0..n {
        let d = u[(i, i)].norm();
        hi = hi.max(d);
        lo = lo.min(d);
    }
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= 1e12) {
        return Err(Error::Singular { cond });
    }
    let b = Mat::from_fn(n, 1, |i, _| sys.v[i]);
    let x = lu.solve(&b);
    let coeffs: Vec<C> = (0..n).map(|i| x[(i, 0)]).collect();
    let m = sys.num_mbfs;
    let port_currents = (0..sys.num_elements).map(|e| (0..m).map(|j| sys.port[j] * coeffs[e * m + j]).sum()).collect();
    Ok(Solution { coeffs, port_currents, num_mbfs: m })
}

/// Principal pattern cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    /// φ = 90°.
    E,
    /// φ = 0°.
    H,
}

impl Plane {
    pub fn phi(self) -> f64 {
        match self {
            Plane::E => PI / 2.0,
            Plane::H => 0.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Plane::E => "E",
            Plane::H => "H",
        }
    }
}

/// One pattern sample; `theta` is signed within the cut.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarFieldSample {
    pub theta: f64,
    pub phi: f64,
    /// dBi.
    pub directivity: f64,
    pub plane: Plane,
}

/// Far-field evaluator of an array of identical elements above the slab.
///
/// The radiation intensity is |Z^TM J̃_u|² + cos²θ |Z^TE J̃_v|² (up to a
/// constant), with the unextracted slab impedances at β = k0 sin θ and
/// J̃_u, J̃_v the components of the total current spectrum along and across
/// the observation azimuth.
pub struct FarField<'a> {
    pub set: &'a MbfSet,
    pub layout: &'a ArrayLayout,
    pub coeffs: &'a [C],
    greens: SpectralGreens,
}

impl<'a> FarField<'a> {
    pub fn new(set: &'a MbfSet, layout: &'a ArrayLayout, coeffs: &'a [C], substrate: SubstrateSpec) -> Result<Self> {
        if coeffs.len() != set.num_mbfs() * layout.len() {
            return Err(Error::DimensionMismatch(format!("{} coefficients for {} elements of {} MBFs", coeffs.len(), layout.len(), set.num_mbfs())));
        }
        Ok(FarField { set, layout, coeffs, greens: SpectralGreens::unextracted(substrate) })
    }

    /// Radiation intensity at each (θ, φ), θ ∈ [0, π/2].
    pub fn intensity(&self, dirs: &[(f64, f64)]) -> Result<Vec<f64>> {
        let k0 = self.greens.substrate.k0();
        let m = self.set.num_mbfs();
        let pts: Vec<(C, C)> = dirs
            .iter()
            .map(|&(t, p)| (C::new(k0 * t.sin() * p.cos(), 0.0), C::new(k0 * t.sin() * p.sin(), 0.0)))
            .collect();
        let [fx, fy] = self.set.spectra_at(&pts, false, false);
        let mut out = Vec::with_capacity(dirs.len());
        let mut weights = vec![C::new(0.0, 0.0); m];
        for (q, &(theta, phi)) in dirs.iter().enumerate() {
            let (kx, ky) = (pts[q].0.re, pts[q].1.re);
            weights.fill(C::new(0.0, 0.0));
            for (e, p) in self.layout.positions.iter().enumerate() {
                let ph = C::from_polar(1.0, kx * p[0] + ky * p[1]);
                for (w, c) in weights.iter_mut().zip(&self.coeffs[e * m..(e + 1) * m]) {
                    *w += c * ph;
                }
            }
            let (mut jx, mut jy) = (C::new(0.0, 0.0), C::new(0.0, 0.0));
            for j in 0..m {
                jx += weights[j] * fx[(q, j)];
                jy += weights[j] * fy[(q, j)];
            }
            let (s, c) = phi.sin_cos();
            let ju = jx * c + jy * s;
            let jv = -jx * s + jy * c;
            let beta = k0 * theta.sin();
            let (ztm, zte) = self
                .greens
                .impedances(C::new(beta * beta, 0.0))
                .map_err(|_| Error::PoleProximity { kx: C::new(kx, 0.0), ky: C::new(ky, 0.0) })?;
            out.push((ztm * ju).norm_sqr() + theta.cos().powi(2) * (zte * jv).norm_sqr());
        }
        Ok(out)
    }

    /// Radiated power (same units as `intensity`·sr) by the midpoint rule on
    /// a 1° hemisphere grid.
    pub fn radiated_power(&self) -> Result<f64> {
        let d = PI / 180.0;
        let mut dirs = Vec::with_capacity(90 * 360);
        for i in 0..90 {
            for j in 0..360 {
                dirs.push(((i as f64 + 0.5) * d, (j as f64 + 0.5) * d));
            }
        }
        let u = self.intensity(&dirs)?;
        Ok(u.iter().zip(&dirs).map(|(u, &(t, _))| u * t.sin() * d * d).sum())
    }
}

/// Directivity (dBi) along a principal cut at signed angles in degrees;
/// negative angles lie at φ + 180°.
pub fn radiation_pattern(field: &FarField<'_>, plane: Plane, angles_deg: &[f64]) -> Result<Vec<FarFieldSample>> {
    let power = field.radiated_power()?;
    if !(power > 0.0) {
        return Err(Error::InvalidSpec("array radiates no power".into()));
    }
    let dirs: Vec<(f64, f64)> = angles_deg
        .iter()
        .map(|&a| {
            let t = a.abs().min(90.0).to_radians();
            (t, if a < 0.0 { plane.phi() + PI } else { plane.phi() })
        })
        .collect();
    let u = field.intensity(&dirs)?;
    Ok(angles_deg
        .iter()
        .zip(&u)
        .zip(&dirs)
        .map(|((&a, &u), &(_, phi))| FarFieldSample {
            theta: a.to_radians(),
            phi,
            directivity: 10.0 * (4.0 * PI * u / power).max(1e-300).log10(),
            plane,
        })
        .collect())
}

/// 10·log10(|a − r|² / max|r|²) per entry, clamped at −300 dB.
pub fn error_db(actual: &[C], reference: &[C]) -> Result<Vec<f64>> {
    if actual.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput);
    }
    if actual.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!("{} values vs {} references", actual.len(), reference.len())));
    }
    let max = reference.iter().map(|r| r.norm_sqr()).fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::InvalidSpec("reference is identically zero".into()));
    }
    Ok(actual.iter().zip(reference).map(|(a, r)| (10.0 * ((a - r).norm_sqr() / max).log10()).max(-300.0)).collect())
}

/// Largest entry of [`error_db`].
pub fn max_error_db(actual: &[C], reference: &[C]) -> Result<f64> {
    Ok(error_db(actual, reference)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// One row of a contour-height study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub gamma: f64,
    pub order: usize,
    pub error_db: f64,
}

/// Error of the tabulated reaction of MBF pair `pair` at `offset` against
/// `reference`, for each contour height and every Taylor order up to
/// `max_order`.
#[allow(clippy::too_many_arguments)]
pub fn contour_height_sweep(
    greens: &SpectralGreens,
    beta_max: f64,
    grid: SpectralGrid,
    pad: usize,
    set: &MbfSet,
    pair: (usize, usize),
    offset: [f64; 2],
    reference: C,
    gammas: &[f64],
    max_order: usize,
) -> Result<Vec<SweepRow>> {
    let cover = offset[0].abs().max(offset[1].abs());
    let mut rows = Vec::new();
    for &gamma in gammas {
        let contour = ContourSpec::new(gamma, beta_max)?;
        let mut sampler = KernelSampler::new(greens, contour, grid, set, set)?;
        let kernels = sampler.sample(pair.0, pair.1, max_order)?;
        let table = cfft_tabulate(&kernels, TabulateOptions { pad, cover: Some(cover) })?;
        for order in 0..=max_order {
            let v = lookup_interaction(&table, offset[0], offset[1], order)?;
            let error_db = max_error_db(&[v], &[reference])?;
            rows.push(SweepRow { gamma, order, error_db });
        }
    }
    Ok(rows)
}
