//! Effective homogeneous medium plus ground-plane image, evaluated in the
//! space domain with the mixed-potential reaction
//! Z = iωμ ∬ T·B g - i/(ωε) ∬ (∇·T)(∇'·B) g.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use faer::Mat;
use num_complex::Complex64 as C;

use crate::consts::{EPS0, MU0};
use crate::geometry::{Cell, Direction, ElementMesh, RooftopBasis};
use crate::mbf::MbfSet;
use crate::quadrature::gauss_legendre;
use crate::spectral::SpectralGreens;

/// Homogeneous kernel matching a spectral extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogKernel {
    pub eps_eff: f64,
    pub k_eff: f64,
    pub image_depth: f64,
    pub image_sign: f64,
    pub omega: f64,
}

impl HomogKernel {
    pub fn new(greens: &SpectralGreens) -> Self {
        HomogKernel {
            eps_eff: greens.eps_eff,
            k_eff: greens.k_eff(),
            image_depth: 2.0 * greens.substrate.h,
            image_sign: -1.0,
            omega: greens.substrate.omega(),
        }
    }

    /// Scalar Green's function (direct + image) at in-plane distance `r`.
    #[inline]
    pub fn g(&self, r: f64) -> C {
        let ri = (r * r + self.image_depth * self.image_depth).sqrt();
        let k = self.k_eff;
        let f = |d: f64| C::from_polar(1.0 / (4.0 * std::f64::consts::PI * d), -k * d);
        f(r) + self.image_sign * f(ri)
    }

    pub(crate) fn vector_coef(&self) -> C {
        C::new(0.0, self.omega * MU0)
    }

    pub(crate) fn scalar_coef(&self) -> C {
        C::new(0.0, -1.0 / (self.omega * EPS0 * self.eps_eff))
    }
}

/// Quadrature orders for cell-pair moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentRule {
    /// Product Gauss order per direction for well-separated cells.
    pub far: usize,
    /// Outer order for near cells.
    pub near_outer: usize,
    /// Outer order when the two cells overlap.
    pub self_outer: usize,
    /// Order per Duffy triangle direction for near cells.
    pub near_inner: usize,
    /// Cells closer than this many diagonals use the near rule.
    pub near_factor: f64,
}

impl Default for MomentRule {
    fn default() -> Self {
        MomentRule { far: 4, near_outer: 8, self_outer: 16, near_inner: 8, near_factor: 2.5 }
    }
}

impl MomentRule {
    pub fn doubled(self) -> Self {
        MomentRule {
            far: 2 * self.far,
            near_outer: 2 * self.near_outer,
            self_outer: 2 * self.self_outer,
            near_inner: 2 * self.near_inner,
            near_factor: self.near_factor * 1.5,
        }
    }
}

/// ∫∫ φ_p(r) φ_q(r') g dr dr' with φ ∈ {1, ξ, η} relative to each cell center.
pub fn cell_pair_moments(k: &HomogKernel, ct: &Cell, cb: &Cell, rule: &MomentRule) -> [[C; 3]; 3] {
    let (ot, ob) = (ct.center(), cb.center());
    let dist = (ot[0] - ob[0]).hypot(ot[1] - ob[1]);
    let diag = |c: &Cell| c.size()[0].hypot(c.size()[1]);
    let near = dist < rule.near_factor * diag(ct).max(diag(cb));
    let mut m = [[C::new(0.0, 0.0); 3]; 3];
    let overlap = ct.x0.max(cb.x0) < ct.x1.min(cb.x1) && ct.y0.max(cb.y0) < ct.y1.min(cb.y1);
    let gl_o = gauss_legendre(match (near, overlap) {
        (false, _) => rule.far,
        (true, false) => rule.near_outer,
        (true, true) => rule.self_outer,
    });
    let pts = |c: &Cell, gl: &[(f64, f64)]| {
        let (hx, hy) = (0.5 * c.size()[0], 0.5 * c.size()[1]);
        let o = c.center();
        let mut v = Vec::with_capacity(gl.len() * gl.len());
        for &(u, wu) in gl {
            for &(s, ws) in gl {
                v.push(([o[0] + hx * u, o[1] + hy * s], [hx * u, hy * s], wu * ws * hx * hy));
            }
        }
        v
    };
    let outer = pts(ct, &gl_o);
    if !near {
        let inner = pts(cb, &gl_o);
        for &(r, lt, wt) in &outer {
            let ft = [wt, wt * lt[0], wt * lt[1]];
            let mut acc = [C::new(0.0, 0.0); 3];
            for &(rp, lb, wb) in &inner {
                let gv = k.g((r[0] - rp[0]).hypot(r[1] - rp[1])) * wb;
                acc[0] += gv;
                acc[1] += gv * lb[0];
                acc[2] += gv * lb[1];
            }
            for p in 0..3 {
                for q in 0..3 {
                    m[p][q] += acc[q] * ft[p];
                }
            }
        }
        return m;
    }
    let gl_i: Vec<(f64, f64)> = gauss_legendre(rule.near_inner).iter().map(|&(x, w)| (0.5 * (x + 1.0), 0.5 * w)).collect();
    for &(r, lt, wt) in &outer {
        let acc = inner_duffy(k, r, cb, &gl_i);
        let ft = [wt, wt * lt[0], wt * lt[1]];
        for p in 0..3 {
            for q in 0..3 {
                m[p][q] += acc[q] * ft[p];
            }
        }
    }
    m
}

/// ∫_cell {1, ξ, η} g(|r - r'|) dr', split into triangles with a vertex at
/// the projection of `r` onto the cell so that the 1/R behaviour is cancelled.
fn inner_duffy(k: &HomogKernel, r: [f64; 2], c: &Cell, gl01: &[(f64, f64)]) -> [C; 3] {
    let p = [r[0].clamp(c.x0, c.x1), r[1].clamp(c.y0, c.y1)];
    let o = c.center();
    let xs = [c.x0, p[0], c.x1];
    let ys = [c.y0, p[1], c.y1];
    let mut out = [C::new(0.0, 0.0); 3];
    for i in 0..2 {
        for j in 0..2 {
            let (xa, xb, ya, yb) = (xs[i], xs[i + 1], ys[j], ys[j + 1]);
            if xb - xa <= 0.0 || yb - ya <= 0.0 {
                continue;
            }
            // p is one corner; the opposite corner splits the rectangle.
            let qx = if (xa - p[0]).abs() < (xb - p[0]).abs() { xb } else { xa };
            let qy = if (ya - p[1]).abs() < (yb - p[1]).abs() { yb } else { ya };
            let opp = [qx, qy];
            for adj in [[qx, p[1]], [p[0], qy]] {
                let e1 = [adj[0] - p[0], adj[1] - p[1]];
                let e2 = [opp[0] - adj[0], opp[1] - adj[1]];
                let area2 = (e1[0] * e2[1] - e1[1] * e2[0]).abs();
                for &(s, ws) in gl01 {
                    for &(t, wt) in gl01 {
                        let rp = [p[0] + s * (e1[0] + t * e2[0]), p[1] + s * (e1[1] + t * e2[1])];
                        let gv = k.g((r[0] - rp[0]).hypot(r[1] - rp[1])) * (ws * wt * s * area2);
                        out[0] += gv;
                        out[1] += gv * (rp[0] - o[0]);
                        out[2] += gv * (rp[1] - o[1]);
                    }
                }
            }
        }
    }
    out
}

/// Restriction of a rooftop to one cell: profile c0 + c1·ξ along `comp`,
/// constant surface divergence `charge`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Part {
    pub cell: Cell,
    pub cell_index: usize,
    pub comp: usize,
    pub c0: f64,
    pub c1: f64,
    pub charge: f64,
}

pub(crate) fn rooftop_parts(r: &RooftopBasis) -> [Part; 2] {
    let (cx, cy, hw) = (r.center[0], r.center[1], 0.5 * r.width);
    let (minus, plus) = match r.direction {
        Direction::X => (
            Cell { x0: cx - r.half_minus, x1: cx, y0: cy - hw, y1: cy + hw },
            Cell { x0: cx, x1: cx + r.half_plus, y0: cy - hw, y1: cy + hw },
        ),
        Direction::Y => (
            Cell { x0: cx - hw, x1: cx + hw, y0: cy - r.half_minus, y1: cy },
            Cell { x0: cx - hw, x1: cx + hw, y0: cy, y1: cy + r.half_plus },
        ),
    };
    let comp = r.direction.index();
    [
        Part { cell: minus, cell_index: r.cell_minus, comp, c0: 0.5, c1: 1.0 / r.half_minus, charge: 1.0 / r.half_minus },
        Part { cell: plus, cell_index: r.cell_plus, comp, c0: 0.5, c1: -1.0 / r.half_plus, charge: -1.0 / r.half_plus },
    ]
}

fn part_pair_reaction(k: &HomogKernel, t: &Part, b: &Part, m: &[[C; 3]; 3]) -> C {
    let mut z = k.scalar_coef() * (t.charge * b.charge) * m[0][0];
    if t.comp == b.comp {
        let (pt, pb) = (1 + t.comp, 1 + b.comp);
        let v = m[0][0] * (t.c0 * b.c0) + m[0][pb] * (t.c0 * b.c1) + m[pt][0] * (t.c1 * b.c0) + m[pt][pb] * (t.c1 * b.c1);
        z += k.vector_coef() * v;
    }
    z
}

fn shifted(c: &Cell, d: [f64; 2]) -> Cell {
    Cell { x0: c.x0 + d[0], x1: c.x1 + d[0], y0: c.y0 + d[1], y1: c.y1 + d[1] }
}

/// Reaction between a test rooftop displaced by `offset` and a basis rooftop,
/// with a convergence flag from a doubled-order rerun.
pub fn homog_reaction(test: &RooftopBasis, offset: [f64; 2], basis: &RooftopBasis, kernel: &HomogKernel) -> (C, bool) {
    let eval = |rule: &MomentRule| {
        let mut z = C::new(0.0, 0.0);
        for t in rooftop_parts(test) {
            for b in rooftop_parts(basis) {
                let m = cell_pair_moments(kernel, &shifted(&t.cell, offset), &b.cell, rule);
                z += part_pair_reaction(kernel, &t, &b, &m);
            }
        }
        z
    };
    let rule = MomentRule::default();
    let z = eval(&rule);
    let z2 = eval(&rule.doubled());
    let converged = (z - z2).norm() <= 1e-4 * z2.norm().max(f64::MIN_POSITIVE);
    (z2, converged)
}

/// Elementary homogeneous block between two copies of a mesh; the test copy
/// sits at `delta` relative to the basis copy.
pub fn elementary_homog_block(kernel: &HomogKernel, mesh: &ElementMesh, delta: [f64; 2], rule: &MomentRule) -> Mat<C> {
    let nc = mesh.cells.len();
    let mut moments = vec![[[C::new(0.0, 0.0); 3]; 3]; nc * nc];
    for (i, ct) in mesh.cells.iter().enumerate() {
        let ct = shifted(ct, delta);
        for (j, cb) in mesh.cells.iter().enumerate() {
            moments[i * nc + j] = cell_pair_moments(kernel, &ct, cb, rule);
        }
    }
    let parts: Vec<[Part; 2]> = mesh.rooftops.iter().map(rooftop_parts).collect();
    let n = mesh.rooftops.len();
    Mat::from_fn(n, n, |t, b| {
        let mut z = C::new(0.0, 0.0);
        for pt in &parts[t] {
            for pb in &parts[b] {
                z += part_pair_reaction(kernel, pt, pb, &moments[pt.cell_index * nc + pb.cell_index]);
            }
        }
        z
    })
}

/// Currents and charges of a set of MBFs sampled at cell Gauss points,
/// pre-multiplied by quadrature weights.
#[derive(Debug, Clone)]
struct Aggregate {
    points: Vec<[f64; 2]>,
    jx: Mat<C>,
    jy: Mat<C>,
    q: Mat<C>,
}

fn aggregate(mesh: &ElementMesh, coeffs: &Mat<C>, order: usize) -> Aggregate {
    let gl = gauss_legendre(order);
    let per_cell = order * order;
    let np = mesh.cells.len() * per_cell;
    let nb = mesh.rooftops.len();
    let mut points = Vec::with_capacity(np);
    let mut weights = Vec::with_capacity(np);
    for c in &mesh.cells {
        let (hx, hy) = (0.5 * c.size()[0], 0.5 * c.size()[1]);
        let o = c.center();
        for &(u, wu) in &gl {
            for &(s, ws) in &gl {
                points.push([o[0] + hx * u, o[1] + hy * s]);
                weights.push(([hx * u, hy * s], wu * ws * hx * hy));
            }
        }
    }
    let mut ax = Mat::<C>::zeros(np, nb);
    let mut ay = Mat::<C>::zeros(np, nb);
    let mut aq = Mat::<C>::zeros(np, nb);
    for (r, rt) in mesh.rooftops.iter().enumerate() {
        for part in rooftop_parts(rt) {
            for k in 0..per_cell {
                let p = part.cell_index * per_cell + k;
                let (loc, w) = weights[p];
                let val = w * (part.c0 + part.c1 * loc[part.comp]);
                if part.comp == 0 {
                    ax[(p, r)] += C::new(val, 0.0);
                } else {
                    ay[(p, r)] += C::new(val, 0.0);
                }
                aq[(p, r)] += C::new(w * part.charge, 0.0);
            }
        }
    }
    Aggregate { points, jx: &ax * coeffs, jy: &ay * coeffs, q: &aq * coeffs }
}

fn conj_mat(m: &Mat<C>) -> Mat<C> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)].conj())
}

/// Reduced homogeneous blocks Q_tᴴ Z^h(Δ) Q_b for a fixed pair of MBF sets,
/// cached per offset.
pub struct HomogReducer {
    kernel: HomogKernel,
    mesh: std::sync::Arc<ElementMesh>,
    qt_h: Mat<C>,
    qb: Mat<C>,
    agg_t: Aggregate,
    agg_b: Aggregate,
    pub rule: MomentRule,
    /// Element gaps below this many cell sizes use elementary blocks.
    pub near_cells: f64,
    shared_points: bool,
    cache: Mutex<HashMap<(i64, i64), Mat<C>>>,
}

fn offset_key(dx: f64, dy: f64) -> (i64, i64) {
    ((dx * 1e12).round() as i64, (dy * 1e12).round() as i64)
}

impl HomogReducer {
    pub fn new(kernel: HomogKernel, set_t: &MbfSet, set_b: &MbfSet) -> Self {
        let mesh = set_b.mesh.clone();
        let qt_conj = conj_mat(&set_t.q);
        HomogReducer {
            kernel,
            agg_t: aggregate(&set_t.mesh, &qt_conj, 2),
            agg_b: aggregate(&mesh, &set_b.q, 2),
            qt_h: set_t.q.adjoint().to_owned(),
            qb: set_b.q.clone(),
            shared_points: Arc::ptr_eq(&set_t.mesh, &mesh) || set_t.mesh.content_hash() == mesh.content_hash(),
            mesh,
            rule: MomentRule::default(),
            near_cells: 3.0,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn kernel(&self) -> &HomogKernel {
        &self.kernel
    }

    fn is_near(&self, d: [f64; 2]) -> bool {
        let h = self.mesh.half_extent;
        let gap = (d[0].abs() - 2.0 * h[0]).max(d[1].abs() - 2.0 * h[1]);
        gap < self.near_cells * self.mesh.max_cell_size()
    }

    /// Reduced block for test element at `(dx, dy)` relative to the basis element.
    pub fn reduce_homog(&self, dx: f64, dy: f64) -> Mat<C> {
        let key = offset_key(dx, dy);
        if let Some(m) = self.cache.lock().expect("homog cache poisoned").get(&key) {
            return m.clone();
        }
        let m = self.compute(dx, dy);
        self.cache.lock().expect("homog cache poisoned").insert(key, m.clone());
        m
    }

    /// Blocks at Δ and -Δ. Far blocks of sets on one mesh share the kernel
    /// matrix, since G(-Δ) = G(Δ)ᵀ.
    pub fn reduce_homog_pm(&self, dx: f64, dy: f64) -> (Mat<C>, Mat<C>) {
        let (kp, km) = (offset_key(dx, dy), offset_key(-dx, -dy));
        {
            let cache = self.cache.lock().expect("homog cache poisoned");
            if let (Some(a), Some(b)) = (cache.get(&kp), cache.get(&km)) {
                return (a.clone(), b.clone());
            }
        }
        let pair = if self.shared_points && !self.is_near([dx, dy]) {
            let g = self.kernel_matrix(dx, dy);
            (self.combine(g.as_ref()), self.combine(g.transpose()))
        } else {
            (self.compute(dx, dy), self.compute(-dx, -dy))
        };
        let mut cache = self.cache.lock().expect("homog cache poisoned");
        cache.insert(kp, pair.0.clone());
        cache.insert(km, pair.1.clone());
        pair
    }

    pub fn cached_offsets(&self) -> usize {
        self.cache.lock().expect("homog cache poisoned").len()
    }

    fn compute(&self, dx: f64, dy: f64) -> Mat<C> {
        if self.is_near([dx, dy]) {
            let z = elementary_homog_block(&self.kernel, &self.mesh, [dx, dy], &self.rule);
            return &self.qt_h * (&z * &self.qb);
        }
        self.combine(self.kernel_matrix(dx, dy).as_ref())
    }

    fn kernel_matrix(&self, dx: f64, dy: f64) -> Mat<C> {
        let (pt, pb) = (&self.agg_t.points, &self.agg_b.points);
        Mat::from_fn(pt.len(), pb.len(), |i, j| self.kernel.g((pt[i][0] + dx - pb[j][0]).hypot(pt[i][1] + dy - pb[j][1])))
    }

    fn combine(&self, g: faer::MatRef<'_, C>) -> Mat<C> {
        let gx = g * &self.agg_b.jx;
        let gy = g * &self.agg_b.jy;
        let gq = g * &self.agg_b.q;
        let vec = self.agg_t.jx.transpose() * &gx + self.agg_t.jy.transpose() * &gy;
        let sca = self.agg_t.q.transpose() * &gq;
        let (cv, cs) = (self.kernel.vector_coef(), self.kernel.scalar_coef());
        Mat::from_fn(vec.nrows(), vec.ncols(), |i, j| cv * vec[(i, j)] + cs * sca[(i, j)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_element_mesh, PatchSpec};
    use crate::spectral::SubstrateSpec;
    use std::sync::Arc;

    fn kernel() -> HomogKernel {
        HomogKernel::new(&SpectralGreens::new(SubstrateSpec::default()))
    }

    fn rt(c: [f64; 2], d: Direction) -> RooftopBasis {
        RooftopBasis { cell_minus: 0, cell_plus: 1, ..RooftopBasis::symmetric(c, d, 0.3e-3, 0.4e-3) }
    }

    #[test]
    fn far_pair_decay_direct_and_with_image() {
        let lambda0 = SubstrateSpec::default().lambda0();
        let r = 10.0 * lambda0;
        let x = rt([0.0, 0.0], Direction::X);
        let ratio = |k: &HomogKernel| {
            // Broadside offset, transverse to the current.
            let a = homog_reaction(&x, [0.0, r], &x, k).0;
            let b = homog_reaction(&x, [0.0, 2.0 * r], &x, k).0;
            a.norm() / b.norm()
        };
        let mut direct = kernel();
        direct.image_sign = 0.0;
        let rd = ratio(&direct);
        assert!((rd - 2.0).abs() < 0.04, "direct ratio {rd}");
        // The opposite-sign image cancels the leading 1/R term in plane.
        let ri = ratio(&kernel());
        assert!((ri - 4.0).abs() < 0.08, "image ratio {ri}");
    }

    #[test]
    fn image_cancels_as_depth_vanishes() {
        let mut k = kernel();
        k.image_depth = 1e-9;
        let basis = rt([0.0, 0.0], Direction::Y);
        let (z, _) = homog_reaction(&basis, [0.5e-3, 0.2e-3], &basis, &k);
        let mut k_direct = k;
        k_direct.image_sign = 0.0;
        let (zd, _) = homog_reaction(&basis, [0.5e-3, 0.2e-3], &basis, &k_direct);
        assert!(z.norm() < 1e-5 * zd.norm(), "{} vs {}", z.norm(), zd.norm());
        // A flipped image sign doubles instead of cancelling.
        let mut k_wrong = k;
        k_wrong.image_sign = 1.0;
        let (zw, _) = homog_reaction(&basis, [0.5e-3, 0.2e-3], &basis, &k_wrong);
        assert!(zw.norm() > zd.norm());
    }

    #[test]
    fn self_reaction_has_positive_resistance() {
        let k = kernel();
        let b = rt([0.0, 0.0], Direction::X);
        let (z, converged) = homog_reaction(&b, [0.0, 0.0], &b, &k);
        assert!(z.re > 0.0 && converged, "{z}");
    }

    #[test]
    fn self_moment_matches_refined_rule() {
        let k = kernel();
        let c = Cell { x0: 0.0, x1: 0.5e-3, y0: 0.0, y1: 0.3e-3 };
        let a = cell_pair_moments(&k, &c, &c, &MomentRule::default());
        let b = cell_pair_moments(&k, &c, &c, &MomentRule::default().doubled().doubled());
        for p in 0..3 {
            assert!((a[p][p] - b[p][p]).norm() < 1e-4 * b[p][p].norm());
        }
    }

    #[test]
    fn reduced_block_is_reciprocal_and_identity_reduces_to_elementary() {
        let mesh = Arc::new(build_element_mesh(&PatchSpec::bare_patch(2e-3, 2e-3, 3, 3)).unwrap());
        let n = mesh.num_rooftops();
        let set = MbfSet::from_matrix(mesh.clone(), Mat::identity(n, n)).unwrap();
        let red = HomogReducer::new(kernel(), &set, &set);
        let near = red.reduce_homog(2.5e-3, 0.4e-3);
        let elem = elementary_homog_block(&kernel(), &mesh, [2.5e-3, 0.4e-3], &MomentRule::default());
        assert!((&near - &elem).norm_max() <= 1e-12 * elem.norm_max());
        let lambda0 = SubstrateSpec::default().lambda0();
        let (dx, dy) = (1.3 * lambda0, -0.7 * lambda0);
        let a = red.reduce_homog(dx, dy);
        let b = red.reduce_homog(-dx, -dy);
        assert!((&a - b.transpose()).norm_max() <= 1e-10 * a.norm_max());
        let e = elementary_homog_block(&kernel(), &mesh, [dx, dy], &MomentRule::default());
        assert!((&a - &e).norm_max() <= 1e-3 * e.norm_max());
        assert_eq!(red.cached_offsets(), 3);
    }

    #[test]
    fn paired_reduction_matches_separate_offsets() {
        use crate::mbf::MbfSet;
        let mesh = Arc::new(build_element_mesh(&PatchSpec::bare_patch(3.0e-3, 4.0e-3, 2, 3)).unwrap());
        let q = Mat::from_fn(mesh.num_rooftops(), 2, |r, c| C::new(1.0 + (r + c) as f64 * 0.2, 0.1 * r as f64 - 0.3 * c as f64));
        let set = MbfSet::from_matrix(mesh, q).unwrap();
        let paired = HomogReducer::new(kernel(), &set, &set);
        let single = HomogReducer::new(kernel(), &set, &set);
        for &(dx, dy) in &[(0.04, 0.013), (-0.007, 0.0)] {
            let (p, m) = paired.reduce_homog_pm(dx, dy);
            let (a, b) = (single.reduce_homog(dx, dy), single.reduce_homog(-dx, -dy));
            assert!((&p - &a).norm_max() <= 1e-12 * a.norm_max());
            assert!((&m - &b).norm_max() <= 1e-12 * b.norm_max());
        }
        assert_eq!(paired.cached_offsets(), 4);
    }
}
