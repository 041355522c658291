//! Spectral-domain Green's function of a grounded slab, surface-wave poles
//! and analytic Fourier transforms of rooftops.
//!
//! Time dependence is e^{iωt}; the spatial transform is
//! F̃(k) = ∫ f(r) e^{+ik·r} dr, so reactions read
//! (1/4π²) ∫ F̃_t(-k) · G̃(k) · F̃_b(k) e^{-ik·Δ} dk.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use faer::Mat;
use num_complex::Complex64 as C;

use crate::consts::{C0, ETA0};
use crate::error::{Error, Result};
use crate::geometry::{Direction, ElementMesh, Fnv, RooftopBasis};

/// Grounded dielectric slab.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubstrateSpec {
    pub eps_r: f64,
    pub h: f64,
    pub loss_tangent: f64,
    pub frequency: f64,
}

impl Default for SubstrateSpec {
    fn default() -> Self {
        SubstrateSpec { eps_r: 2.2, h: 0.381e-3, loss_tangent: 0.0, frequency: 24.125e9 }
    }
}

impl SubstrateSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_r >= 1.0) || !(self.h > 0.0) || !(self.frequency > 0.0) || !(self.loss_tangent >= 0.0) {
            return Err(Error::InvalidSpec(format!("invalid substrate {self:?}")));
        }
        Ok(())
    }

    pub fn k0(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.frequency / C0
    }

    pub fn lambda0(&self) -> f64 {
        C0 / self.frequency
    }

    pub fn omega(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.frequency
    }

    /// Complex relative permittivity εr(1 - i tanδ).
    pub fn eps_complex(&self) -> C {
        C::new(self.eps_r, -self.eps_r * self.loss_tangent)
    }

    /// Real dielectric wavenumber k0√εr.
    pub fn kd(&self) -> f64 {
        self.k0() * self.eps_r.sqrt()
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::default();
        for v in [self.eps_r, self.h, self.loss_tangent, self.frequency] {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// What is subtracted from the layered kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Extraction {
    None,
    HomogeneousImage,
}

/// Transverse dyadic (xy = yx).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dyadic {
    pub xx: C,
    pub xy: C,
    pub yy: C,
}

impl Dyadic {
    pub fn get(&self, a: usize, b: usize) -> C {
        match (a, b) {
            (0, 0) => self.xx,
            (1, 1) => self.yy,
            _ => self.xy,
        }
    }
}

/// Grounded-slab spectral dyadic with optional homogeneous-medium extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralGreens {
    pub substrate: SubstrateSpec,
    pub extraction: Extraction,
    pub eps_eff: f64,
}

/// Wavenumber with Im ≤ 0: sqrt(k² − β²) on the proper sheet.
#[inline]
pub fn kz_proper(k2: C, beta2: C) -> C {
    let s = (k2 - beta2).sqrt();
    if s.im > 0.0 {
        -s
    } else {
        s
    }
}

impl SpectralGreens {
    /// Extraction on with the average permittivity (εr + 1)/2.
    pub fn new(substrate: SubstrateSpec) -> Self {
        SpectralGreens { substrate, extraction: Extraction::HomogeneousImage, eps_eff: 0.5 * (substrate.eps_r + 1.0) }
    }

    pub fn unextracted(substrate: SubstrateSpec) -> Self {
        SpectralGreens { extraction: Extraction::None, ..Self::new(substrate) }
    }

    pub fn with_extraction(mut self, extraction: Extraction) -> Self {
        self.extraction = extraction;
        self
    }

    pub fn k_eff(&self) -> f64 {
        self.substrate.k0() * self.eps_eff.sqrt()
    }

    /// TM and TE denominators of the slab impedances at radial wavenumber² β².
    pub fn denominators(&self, beta2: C) -> (C, C) {
        let s = &self.substrate;
        let k0 = s.k0();
        let eps = s.eps_complex();
        let kz0 = kz_proper(C::new(k0 * k0, 0.0), beta2);
        let kz1 = kz_proper(eps * k0 * k0, beta2);
        let (sn, cs) = ((kz1 * s.h).sin(), (kz1 * s.h).cos());
        (kz1 * sn - C::i() * eps * kz0 * cs, kz0 * sn - C::i() * kz1 * cs)
    }

    /// TM and TE impedances (ohm) of the layered kernel minus the extraction.
    pub fn impedances(&self, beta2: C) -> std::result::Result<(C, C), ()> {
        let s = &self.substrate;
        let k0 = s.k0();
        let eps = s.eps_complex();
        let kz0 = kz_proper(C::new(k0 * k0, 0.0), beta2);
        let kz1 = kz_proper(eps * k0 * k0, beta2);
        let arg = kz1 * s.h;
        let (ztm, zte) = if arg.im.abs() <= 30.0 {
            let (sn, cs) = (arg.sin(), arg.cos());
            let dtm = kz1 * sn - C::i() * eps * kz0 * cs;
            let dte = kz0 * sn - C::i() * kz1 * cs;
            let scale_tm = (kz1 * sn).norm() + (eps * kz0 * cs).norm();
            let scale_te = (kz0 * sn).norm() + (kz1 * cs).norm();
            if dtm.norm() <= 1e-30 * scale_tm || dte.norm() <= 1e-30 * scale_te {
                return Err(());
            }
            (ETA0 * kz0 * kz1 * sn / (k0 * dtm), k0 * ETA0 * sn / dte)
        } else {
            // tan(kz1 h) has saturated to ±i.
            let t = C::new(0.0, arg.im.signum());
            (
                ETA0 * kz0 * kz1 * t / (k0 * (kz1 * t - C::i() * eps * kz0)),
                k0 * ETA0 * t / (kz0 * t - C::i() * kz1),
            )
        };
        if self.extraction == Extraction::None {
            return Ok((ztm, zte));
        }
        let ke2 = C::new(k0 * k0 * self.eps_eff, 0.0);
        let kze = kz_proper(ke2, beta2);
        let img = C::new(1.0, 0.0) - (-2.0 * C::i() * kze * s.h).exp();
        let htm = ETA0 * kze / (2.0 * k0 * self.eps_eff) * img;
        let hte = k0 * ETA0 / (2.0 * kze) * img;
        Ok((ztm - htm, zte - hte))
    }

    /// Transverse dyadic at (kx, ky); -E for a unit surface current.
    pub fn green_spectral(&self, kx: C, ky: C) -> Result<Dyadic> {
        let beta2 = kx * kx + ky * ky;
        let (ztm, zte) = self.impedances(beta2).map_err(|_| Error::PoleProximity { kx, ky })?;
        Ok(dyadic_from(kx, ky, beta2, ztm, zte, self.substrate.k0()))
    }

    /// Real-axis surface-wave poles in (k0, kd), ascending (lossless only).
    pub fn locate_surface_wave_poles(&self) -> Vec<f64> {
        let s = &self.substrate;
        let (k0, kd) = (s.k0(), s.kd());
        if kd <= k0 * (1.0 + 1e-12) {
            return Vec::new();
        }
        let kz1 = |b: f64| (s.eps_r * k0 * k0 - b * b).max(0.0).sqrt();
        let a0 = |b: f64| (b * b - k0 * k0).max(0.0).sqrt();
        let tm = |b: f64| kz1(b) * (kz1(b) * s.h).sin() - s.eps_r * a0(b) * (kz1(b) * s.h).cos();
        let te = |b: f64| {
            let x = kz1(b) * s.h;
            let sinc = if x.abs() < 1e-8 { s.h } else { x.sin() / kz1(b) };
            a0(b) * sinc + x.cos()
        };
        let mut poles = Vec::new();
        let n = 20_000;
        let f: [&dyn Fn(f64) -> f64; 2] = [&tm, &te];
        for g in f {
            let at = |i: usize| k0 + (kd - k0) * i as f64 / n as f64;
            let mut prev = g(at(1));
            for i in 2..n {
                let cur = g(at(i));
                if prev == 0.0 || prev.signum() != cur.signum() {
                    let (mut a, mut b) = (at(i - 1), at(i));
                    let fa = g(a);
                    while b - a > 1e-12 * b {
                        let m = 0.5 * (a + b);
                        if g(m).signum() == fa.signum() {
                            a = m;
                        } else {
                            b = m;
                        }
                    }
                    poles.push(0.5 * (a + b));
                }
                prev = cur;
            }
        }
        poles.sort_by(f64::total_cmp);
        poles
    }
}

#[inline]
pub(crate) fn dyadic_from(kx: C, ky: C, beta2: C, ztm: C, zte: C, k0: f64) -> Dyadic {
    if beta2.norm() < 1e-24 * k0 * k0 {
        return Dyadic { xx: ztm, xy: C::new(0.0, 0.0), yy: ztm };
    }
    Dyadic {
        xx: (kx * kx * ztm + ky * ky * zte) / beta2,
        xy: kx * ky * (ztm - zte) / beta2,
        yy: (ky * ky * ztm + kx * kx * zte) / beta2,
    }
}

/// Radial contour β_c = β_R(1 + iγ) on [0, beta_max].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourSpec {
    pub gamma: f64,
    pub beta_max: f64,
}

impl ContourSpec {
    pub fn new(gamma: f64, beta_max: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) || !(beta_max > 0.0) {
            return Err(Error::InvalidSpec(format!("contour gamma {gamma} must lie in (0,1), beta_max > 0")));
        }
        Ok(ContourSpec { gamma, beta_max })
    }

    /// γ = 1/130 truncated at 5 k_d.
    pub fn default_for(substrate: &SubstrateSpec) -> Self {
        ContourSpec { gamma: 1.0 / 130.0, beta_max: 5.0 * substrate.kd() }
    }

    /// Undeformed path; only meaningful for lossy substrates.
    pub fn real_axis(beta_max: f64) -> Self {
        ContourSpec { gamma: 0.0, beta_max }
    }

    pub fn dbetai_dbetar(&self) -> f64 {
        self.gamma
    }

    /// 1 + iγ.
    pub fn factor(&self) -> C {
        C::new(1.0, self.gamma)
    }
}

/// (e^z - 1 - z)/z², entire.
#[inline]
fn e2(z: C) -> C {
    if z.norm() < 0.5 {
        let mut term = C::new(0.5, 0.0);
        let mut sum = term;
        for n in 3..20 {
            term = term * z / n as f64;
            sum += term;
        }
        sum
    } else {
        (z.exp() - 1.0 - z) / (z * z)
    }
}

/// sin(z)/z, entire.
#[inline]
fn sinc(z: C) -> C {
    if z.norm() < 1e-3 {
        let z2 = z * z;
        1.0 - z2 / 6.0 + z2 * z2 / 120.0
    } else {
        z.sin() / z
    }
}

/// One-dimensional rooftop profile along an axis, centered at `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile1D {
    /// Triangle rising over `minus` before the center and falling over `plus` after.
    Triangle { minus: f64, plus: f64 },
    /// Unit pulse of the given width.
    Pulse { width: f64 },
}

/// Transform ∫ p(u - c) e^{iku} du of a 1D profile.
#[inline]
pub fn profile_ft(p: Profile1D, center: f64, k: C) -> C {
    shape_ft(p, k) * (C::i() * k * center).exp()
}

/// Transform of a profile centered at the origin.
#[inline]
fn shape_ft(p: Profile1D, k: C) -> C {
    match p {
        Profile1D::Triangle { minus, plus } => {
            let z = C::i() * k;
            e2(z * plus) * plus + e2(-z * minus) * minus
        }
        Profile1D::Pulse { width } => sinc(k * (0.5 * width)) * width,
    }
}

/// Distinct profiles along one axis, factored into shapes and center phases.
/// Sorted centers are chained by a few distinct steps, so one wavenumber
/// costs a handful of exponentials regardless of the mesh size.
#[derive(Debug, Clone, Default)]
struct AxisFactors {
    shapes: Vec<Profile1D>,
    centers: Vec<f64>,
    steps: Vec<f64>,
    /// For centers[i], i ≥ 1: index of centers[i] - centers[i-1] in `steps`.
    step_of: Vec<usize>,
    /// Per factor: (shape index, center index).
    factors: Vec<(usize, usize)>,
}

impl AxisFactors {
    fn new(list: &[(Profile1D, f64)]) -> Self {
        let q = |v: f64| (v * 1e13).round() as i64;
        let mut shapes: Vec<Profile1D> = Vec::new();
        let mut centers: Vec<f64> = list.iter().map(|&(_, c)| c).collect();
        centers.sort_by(f64::total_cmp);
        centers.dedup_by(|a, b| q(*a) == q(*b));
        let mut steps: Vec<f64> = Vec::new();
        let mut step_of = vec![0];
        for w in centers.windows(2) {
            let d = w[1] - w[0];
            let idx = match steps.iter().position(|&s| (s - d).abs() <= 1e-12 * d.abs().max(1e-9)) {
                Some(i) => i,
                None => {
                    steps.push(d);
                    steps.len() - 1
                }
            };
            step_of.push(idx);
        }
        let factors = list
            .iter()
            .map(|&(p, c)| {
                let si = shapes.iter().position(|&s| s == p).unwrap_or_else(|| {
                    shapes.push(p);
                    shapes.len() - 1
                });
                let ci = centers.iter().position(|&x| q(x) == q(c)).expect("center was inserted");
                (si, ci)
            })
            .collect();
        AxisFactors { shapes, centers, steps, step_of, factors }
    }

    fn eval(&self, k: C, scratch: &mut Vec<C>, out: &mut Vec<C>) {
        let ik = C::i() * k;
        let ns = self.shapes.len();
        let nd = self.steps.len();
        scratch.clear();
        scratch.extend(self.shapes.iter().map(|&p| shape_ft(p, k)));
        scratch.extend(self.steps.iter().map(|&d| (ik * d).exp()));
        if let Some(&c0) = self.centers.first() {
            scratch.push((ik * c0).exp());
        }
        for i in 1..self.centers.len() {
            let prev = scratch[ns + nd + i - 1];
            scratch.push(prev * scratch[ns + self.step_of[i]]);
        }
        out.clear();
        out.extend(self.factors.iter().map(|&(si, ci)| scratch[si] * scratch[ns + nd + ci]));
    }
}

/// x and y profiles of a rooftop.
pub fn rooftop_profiles(b: &RooftopBasis) -> (Profile1D, Profile1D) {
    let tri = Profile1D::Triangle { minus: b.half_minus, plus: b.half_plus };
    let pulse = Profile1D::Pulse { width: b.width };
    match b.direction {
        Direction::X => (tri, pulse),
        Direction::Y => (pulse, tri),
    }
}

/// Fourier transform of a rooftop as an (x, y) vector.
pub fn rooftop_ft(b: &RooftopBasis, kx: C, ky: C) -> [C; 2] {
    let (px, py) = rooftop_profiles(b);
    let v = profile_ft(px, b.center[0], kx) * profile_ft(py, b.center[1], ky);
    match b.direction {
        Direction::X => [v, C::new(0.0, 0.0)],
        Direction::Y => [C::new(0.0, 0.0), v],
    }
}

/// Separable spectra of all rooftops of a mesh, with shared 1D factors.
#[derive(Debug, Clone)]
pub struct RooftopSpectra {
    pub x_factors: Vec<(Profile1D, f64)>,
    pub y_factors: Vec<(Profile1D, f64)>,
    /// Per rooftop: component, x factor index, y factor index.
    pub map: Vec<(usize, usize, usize)>,
    x_axis: AxisFactors,
    y_axis: AxisFactors,
}

impl RooftopSpectra {
    pub fn new(mesh: &ElementMesh) -> Self {
        fn key(p: Profile1D, c: f64) -> (u8, i64, i64, i64) {
            let q = |v: f64| (v * 1e13).round() as i64;
            match p {
                Profile1D::Triangle { minus, plus } => (0, q(minus), q(plus), q(c)),
                Profile1D::Pulse { width } => (1, q(width), 0, q(c)),
            }
        }
        let mut xs: Vec<(Profile1D, f64)> = Vec::new();
        let mut ys: Vec<(Profile1D, f64)> = Vec::new();
        let mut xk = HashMap::new();
        let mut yk = HashMap::new();
        let mut map = Vec::with_capacity(mesh.rooftops.len());
        for r in &mesh.rooftops {
            let (px, py) = rooftop_profiles(r);
            let ix = *xk.entry(key(px, r.center[0])).or_insert_with(|| {
                xs.push((px, r.center[0]));
                xs.len() - 1
            });
            let iy = *yk.entry(key(py, r.center[1])).or_insert_with(|| {
                ys.push((py, r.center[1]));
                ys.len() - 1
            });
            map.push((r.direction.index(), ix, iy));
        }
        let (x_axis, y_axis) = (AxisFactors::new(&xs), AxisFactors::new(&ys));
        RooftopSpectra { x_factors: xs, y_factors: ys, map, x_axis, y_axis }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Scalar spectra (along each rooftop's direction) at one wavenumber.
    pub fn eval(&self, kx: C, ky: C, fx: &mut Vec<C>, fy: &mut Vec<C>, out: &mut [C]) {
        let mut scratch = Vec::with_capacity(64);
        self.x_axis.eval(kx, &mut scratch, fx);
        self.y_axis.eval(ky, &mut scratch, fy);
        for (o, &(_, ix, iy)) in out.iter_mut().zip(&self.map) {
            *o = fx[ix] * fy[iy];
        }
    }

    /// Matrix of 1D x factors (rows: wavenumbers).
    pub fn x_factor_matrix(&self, ks: &[C]) -> Mat<C> {
        Mat::from_fn(ks.len(), self.x_factors.len(), |i, j| {
            let (p, c) = self.x_factors[j];
            profile_ft(p, c, ks[i])
        })
    }

    pub fn y_factor_matrix(&self, ks: &[C]) -> Mat<C> {
        Mat::from_fn(ks.len(), self.y_factors.len(), |i, j| {
            let (p, c) = self.y_factors[j];
            profile_ft(p, c, ks[i])
        })
    }
}
