//! Printed element geometry, its rooftop mesh and array layouts.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Current direction of a rooftop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    X,
    Y,
}

impl Direction {
    pub fn index(self) -> usize {
        match self {
            Direction::X => 0,
            Direction::Y => 1,
        }
    }
}

/// Cells per region of the structured mesh.
///
/// The patch is split in x into two side strips of `patch_side_cols` cells and
/// a central strip of `feed_cols` cells aligned with the feed line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MeshDensity {
    pub patch_side_cols: usize,
    pub patch_rows: usize,
    pub feed_cols: usize,
    pub feed_rows: usize,
}

impl Default for MeshDensity {
    fn default() -> Self {
        // 12x9 patch cells plus 2x16 feed cells give 243 rooftops.
        MeshDensity { patch_side_cols: 5, patch_rows: 9, feed_cols: 2, feed_rows: 16 }
    }
}

impl MeshDensity {
    /// Same layout with every region refined by `factor` in both directions.
    pub fn scaled(self, factor: usize) -> Self {
        MeshDensity {
            patch_side_cols: self.patch_side_cols * factor,
            patch_rows: self.patch_rows * factor,
            feed_cols: self.feed_cols * factor,
            feed_rows: self.feed_rows * factor,
        }
    }
}

/// Rectangular patch fed by a microstrip line along -y.
///
/// Lengths are along y (the resonant direction), widths along x.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub patch_length: f64,
    pub patch_width: f64,
    pub feed_length: f64,
    pub feed_width: f64,
    /// Index of the transverse edge row of the feed line carrying the gap,
    /// counted from the open end of the line (1..feed_rows).
    pub port_location: usize,
    pub mesh_density: MeshDensity,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_length: 3.82e-3,
            patch_width: 6.5e-3,
            feed_length: 2.4e-3,
            feed_width: 0.64e-3,
            port_location: 1,
            mesh_density: MeshDensity::default(),
        }
    }
}

impl PatchSpec {
    /// A bare rectangular patch without feed line.
    pub fn bare_patch(length: f64, width: f64, cols: usize, rows: usize) -> Self {
        PatchSpec {
            patch_length: length,
            patch_width: width,
            feed_length: 0.0,
            feed_width: 0.0,
            port_location: 0,
            mesh_density: MeshDensity { patch_side_cols: cols, patch_rows: rows, feed_cols: 0, feed_rows: 0 },
        }
    }

    pub fn has_feed(&self) -> bool {
        self.feed_length > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.mesh_density;
        if !(self.patch_length > 0.0 && self.patch_width > 0.0) {
            return Err(Error::InvalidSpec("patch dimensions must be positive".into()));
        }
        if d.patch_rows == 0 || d.patch_side_cols == 0 {
            return Err(Error::InvalidSpec("patch mesh density must be positive".into()));
        }
        if self.has_feed() {
            if !(self.feed_width > 0.0) || self.feed_width >= self.patch_width {
                return Err(Error::InvalidSpec("feed width must be positive and narrower than the patch".into()));
            }
            if d.feed_cols < 1 {
                return Err(Error::Mesh("feed line must span at least one transverse cell".into()));
            }
            if d.feed_rows < 2 {
                return Err(Error::Mesh("feed line needs at least two rows".into()));
            }
            if self.port_location == 0 || self.port_location >= d.feed_rows {
                return Err(Error::InvalidSpec(format!(
                    "port_location {} must lie in 1..{}",
                    self.port_location, d.feed_rows
                )));
            }
        }
        Ok(())
    }

    /// Stable content hash used to key cache files.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::default();
        for v in [self.patch_length, self.patch_width, self.feed_length, self.feed_width] {
            v.to_bits().hash(&mut h);
        }
        self.port_location.hash(&mut h);
        self.mesh_density.hash(&mut h);
        h.finish()
    }
}

/// Rectangular mesh cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Cell {
    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)]
    }

    pub fn size(&self) -> [f64; 2] {
        [self.x1 - self.x0, self.y1 - self.y0]
    }
}

/// Rooftop on two adjacent cells sharing the edge through `center`.
///
/// The current is along `direction`, rises linearly from zero over
/// `half_minus` to one at the shared edge, then falls to zero over
/// `half_plus`, and is uniform over `width` across.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RooftopBasis {
    pub center: [f64; 2],
    pub direction: Direction,
    pub half_minus: f64,
    pub half_plus: f64,
    pub width: f64,
    /// Cell behind the edge (current flows out of it).
    pub cell_minus: usize,
    /// Cell in front of the edge.
    pub cell_plus: usize,
}

impl RooftopBasis {
    /// Symmetric rooftop not attached to a mesh.
    pub fn symmetric(center: [f64; 2], direction: Direction, half_length: f64, width: f64) -> Self {
        RooftopBasis {
            center,
            direction,
            half_minus: half_length,
            half_plus: half_length,
            width,
            cell_minus: usize::MAX,
            cell_plus: usize::MAX,
        }
    }

    /// Current amplitude at a point (along `direction`).
    pub fn value(&self, p: [f64; 2]) -> f64 {
        let (u, v) = self.local(p);
        if v.abs() > 0.5 * self.width {
            return 0.0;
        }
        if (-self.half_minus..=0.0).contains(&u) {
            1.0 + u / self.half_minus
        } else if u > 0.0 && u <= self.half_plus {
            1.0 - u / self.half_plus
        } else {
            0.0
        }
    }

    fn local(&self, p: [f64; 2]) -> (f64, f64) {
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        match self.direction {
            Direction::X => (d[0], d[1]),
            Direction::Y => (d[1], d[0]),
        }
    }
}

/// Delta-gap port: rooftops crossing the gap line with their edge lengths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PortDef {
    pub rooftops: Vec<(usize, f64)>,
}

/// Meshed element in its local frame (origin at the bounding-box center).
#[derive(Debug, Clone)]
pub struct ElementMesh {
    pub spec: PatchSpec,
    pub cells: Vec<Cell>,
    pub rooftops: Vec<RooftopBasis>,
    pub port: PortDef,
    /// Half extents of the bounding box.
    pub half_extent: [f64; 2],
}

impl ElementMesh {
    pub fn num_rooftops(&self) -> usize {
        self.rooftops.len()
    }

    /// Port vector p with p[r] = edge width for gap rooftops.
    pub fn port_vector(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.rooftops.len()];
        for &(r, w) in &self.port.rooftops {
            p[r] = w;
        }
        p
    }

    /// Radius of the smallest origin-centered disc containing the element.
    pub fn radius(&self) -> f64 {
        self.half_extent[0].hypot(self.half_extent[1])
    }

    pub fn max_cell_size(&self) -> f64 {
        self.cells.iter().map(|c| c.size()[0].max(c.size()[1])).fold(0.0, f64::max)
    }

    pub fn content_hash(&self) -> u64 {
        self.spec.content_hash()
    }
}

fn uniform_lines(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect()
}

fn quantize(v: f64) -> i64 {
    (v * 1e12).round() as i64
}

/// Meshes the element and locates the port edges.
pub fn build_element_mesh(spec: &PatchSpec) -> Result<ElementMesh> {
    spec.validate()?;
    let d = spec.mesh_density;
    let (w, lp) = (spec.patch_width, spec.patch_length);
    let lf = if spec.has_feed() { spec.feed_length } else { 0.0 };
    let y_shift = 0.5 * (lf + lp);

    let xs: Vec<f64> = if spec.has_feed() {
        let wf = spec.feed_width;
        let mut v = uniform_lines(-0.5 * w, -0.5 * wf, d.patch_side_cols);
        v.extend(uniform_lines(-0.5 * wf, 0.5 * wf, d.feed_cols).into_iter().skip(1));
        v.extend(uniform_lines(0.5 * wf, 0.5 * w, d.patch_side_cols).into_iter().skip(1));
        v
    } else {
        uniform_lines(-0.5 * w, 0.5 * w, d.patch_side_cols)
    };
    let ys_patch = uniform_lines(lf - y_shift, lf + lp - y_shift, d.patch_rows);

    let mut cells = Vec::new();
    for r in 0..d.patch_rows {
        for c in 0..xs.len() - 1 {
            cells.push(Cell { x0: xs[c], x1: xs[c + 1], y0: ys_patch[r], y1: ys_patch[r + 1] });
        }
    }
    let mut feed_ys = Vec::new();
    if spec.has_feed() {
        let wf = spec.feed_width;
        let fx = uniform_lines(-0.5 * wf, 0.5 * wf, d.feed_cols);
        feed_ys = uniform_lines(-y_shift, lf - y_shift, d.feed_rows);
        // Reuse the exact patch x-lines where the feed meets the patch.
        let fx: Vec<f64> = fx
            .iter()
            .map(|&x| *xs.iter().min_by(|a, b| (*a - x).abs().total_cmp(&(*b - x).abs())).unwrap())
            .collect();
        for r in 0..d.feed_rows {
            for c in 0..d.feed_cols {
                cells.push(Cell { x0: fx[c], x1: fx[c + 1], y0: feed_ys[r], y1: feed_ys[r + 1] });
            }
        }
    }

    // Interior edges: shared by exactly two cells.
    type Key = (u8, i64, i64, i64);
    let mut edges: HashMap<Key, [Option<usize>; 2]> = HashMap::new();
    for (i, c) in cells.iter().enumerate() {
        // Vertical edges (x-directed currents): slot 0 = cell on the left.
        edges.entry((0, quantize(c.x1), quantize(c.y0), quantize(c.y1))).or_default()[0] = Some(i);
        edges.entry((0, quantize(c.x0), quantize(c.y0), quantize(c.y1))).or_default()[1] = Some(i);
        // Horizontal edges (y-directed currents): slot 0 = cell below.
        edges.entry((1, quantize(c.y1), quantize(c.x0), quantize(c.x1))).or_default()[0] = Some(i);
        edges.entry((1, quantize(c.y0), quantize(c.x0), quantize(c.x1))).or_default()[1] = Some(i);
    }
    let mut keys: Vec<Key> = edges
        .iter()
        .filter(|(_, v)| v[0].is_some() && v[1].is_some())
        .map(|(k, _)| *k)
        .collect();
    keys.sort_unstable();
    let mut rooftops = Vec::with_capacity(keys.len());
    for k in keys {
        let [m, p] = edges[&k];
        let (cm, cp) = (&cells[m.unwrap()], &cells[p.unwrap()]);
        let rt = if k.0 == 0 {
            RooftopBasis {
                center: [cm.x1, 0.5 * (cm.y0 + cm.y1)],
                direction: Direction::X,
                half_minus: cm.x1 - cm.x0,
                half_plus: cp.x1 - cp.x0,
                width: cm.y1 - cm.y0,
                cell_minus: m.unwrap(),
                cell_plus: p.unwrap(),
            }
        } else {
            RooftopBasis {
                center: [0.5 * (cm.x0 + cm.x1), cm.y1],
                direction: Direction::Y,
                half_minus: cm.y1 - cm.y0,
                half_plus: cp.y1 - cp.y0,
                width: cm.x1 - cm.x0,
                cell_minus: m.unwrap(),
                cell_plus: p.unwrap(),
            }
        };
        rooftops.push(rt);
    }

    let mut port = PortDef::default();
    if spec.has_feed() {
        let y_gap = feed_ys[spec.port_location];
        for (i, r) in rooftops.iter().enumerate() {
            if r.direction == Direction::Y
                && (r.center[1] - y_gap).abs() < 1e-12
                && r.center[0].abs() < 0.5 * spec.feed_width
            {
                port.rooftops.push((i, r.width));
            }
        }
    }
    Ok(ElementMesh {
        spec: spec.clone(),
        cells,
        rooftops,
        port,
        half_extent: [0.5 * w, 0.5 * (lf + lp)],
    })
}

/// Positions of identical elements.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayLayout {
    pub positions: Vec<[f64; 2]>,
}

impl ArrayLayout {
    pub fn new(positions: Vec<[f64; 2]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyInput);
        }
        if positions.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::InvalidSpec("non-finite position".into()));
        }
        check_duplicates(&positions)?;
        Ok(ArrayLayout { positions })
    }

    /// `nx` by `ny` grid starting at the origin.
    pub fn grid(nx: usize, ny: usize, sx: f64, sy: f64) -> Result<Self> {
        let mut pos = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                pos.push([i as f64 * sx, j as f64 * sy]);
            }
        }
        Self::new(pos)
    }

    /// `n` random positions in a `side` square whose element footprints
    /// (`footprint` = full bounding-box size plus clearance) do not overlap.
    pub fn random_in_square(n: usize, side: f64, footprint: [f64; 2], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos: Vec<[f64; 2]> = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while pos.len() < n {
            attempts += 1;
            if attempts > 10_000_000 {
                return Err(Error::InvalidSpec("could not place elements without overlap".into()));
            }
            let p = [rng.gen_range(0.0..=side), rng.gen_range(0.0..=side)];
            if pos
                .iter()
                .all(|q| (p[0] - q[0]).abs() >= footprint[0] || (p[1] - q[1]).abs() >= footprint[1])
            {
                pos.push(p);
            }
        }
        Self::new(pos)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Largest |ΔX| or |ΔY| over all pairs.
    pub fn d_max(&self) -> f64 {
        let span = |k: usize| {
            let (lo, hi) = self
                .positions
                .iter()
                .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[k]), hi.max(p[k])));
            hi - lo
        };
        span(0).max(span(1))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# X Y (m)\n");
        for p in &self.positions {
            s.push_str(&format!("{} {}\n", p[0], p[1]));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pos = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(Error::Parse { line: i + 1, msg: format!("expected `X Y`, got `{line}`") });
            }
            let mut xy = [0.0; 2];
            for (k, f) in fields.iter().enumerate() {
                xy[k] = f
                    .parse::<f64>()
                    .map_err(|e| Error::Parse { line: i + 1, msg: format!("`{f}`: {e}") })?;
                if !xy[k].is_finite() {
                    return Err(Error::Parse { line: i + 1, msg: format!("non-finite value `{f}`") });
                }
            }
            pos.push(xy);
        }
        Self::new(pos)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Reads a layout file (`X Y` per line, `#` comments).
pub fn load_array_layout(path: &Path) -> Result<ArrayLayout> {
    ArrayLayout::parse(&std::fs::read_to_string(path)?)
}

fn check_duplicates(positions: &[[f64; 2]]) -> Result<()> {
    const TOL: f64 = 1e-9;
    let mut idx: Vec<usize> = (0..positions.len()).collect();
    idx.sort_by(|&a, &b| positions[a][0].total_cmp(&positions[b][0]));
    for (k, &a) in idx.iter().enumerate() {
        for &b in &idx[k + 1..] {
            if positions[b][0] - positions[a][0] > TOL {
                break;
            }
            if (positions[b][1] - positions[a][1]).abs() <= TOL {
                return Err(Error::DuplicatePosition { first: a.min(b), second: a.max(b) });
            }
        }
    }
    Ok(())
}

/// 64-bit FNV-1a, stable across runs and platforms.
#[derive(Debug, Clone)]
pub(crate) struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Adjacent cell pairs by brute-force geometric comparison.
    fn count_shared_edges(cells: &[Cell]) -> usize {
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        let mut n = 0;
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                let (a, b) = (cells[i], cells[j]);
                let vertical = (close(a.x1, b.x0) || close(b.x1, a.x0)) && close(a.y0, b.y0) && close(a.y1, b.y1);
                let horizontal = (close(a.y1, b.y0) || close(b.y1, a.y0)) && close(a.x0, b.x0) && close(a.x1, b.x1);
                n += (vertical || horizontal) as usize;
            }
        }
        n
    }

    #[test]
    fn default_element_has_243_rooftops() {
        let mesh = build_element_mesh(&PatchSpec::default()).unwrap();
        assert_eq!(mesh.num_rooftops(), 243);
        assert_eq!(mesh.cells.len(), 140);
        assert_eq!(mesh.port.rooftops.len(), 2);
    }

    #[test]
    fn bare_two_by_two_patch() {
        let mesh = build_element_mesh(&PatchSpec::bare_patch(1.0, 1.0, 2, 2)).unwrap();
        let nx = mesh.rooftops.iter().filter(|r| r.direction == Direction::X).count();
        assert_eq!((mesh.num_rooftops(), nx), (4, 2));
    }

    #[test]
    fn doubled_density_matches_edge_enumeration() {
        let mut spec = PatchSpec::default();
        spec.mesh_density = spec.mesh_density.scaled(2);
        spec.port_location = 2;
        let mesh = build_element_mesh(&spec).unwrap();
        assert_eq!(mesh.num_rooftops(), count_shared_edges(&mesh.cells));
        assert_eq!(mesh.num_rooftops(), 1046);
        let ratio = mesh.num_rooftops() as f64 / 243.0;
        assert!((3.5..4.5).contains(&ratio));
    }

    #[test]
    fn feed_narrower_than_one_cell_is_rejected() {
        let mut spec = PatchSpec::default();
        spec.mesh_density.feed_cols = 0;
        assert!(matches!(build_element_mesh(&spec), Err(Error::Mesh(_))));
    }

    #[test]
    fn origin_is_bounding_box_center() {
        let mesh = build_element_mesh(&PatchSpec::default()).unwrap();
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for c in &mesh.cells {
            lo = [lo[0].min(c.x0), lo[1].min(c.y0)];
            hi = [hi[0].max(c.x1), hi[1].max(c.y1)];
        }
        assert!((lo[0] + hi[0]).abs() < 1e-15 && (lo[1] + hi[1]).abs() < 1e-15);
    }

    #[test]
    fn every_rooftop_carries_zero_net_charge_and_cells_conform() {
        let mesh = build_element_mesh(&PatchSpec::default()).unwrap();
        let mut incidence = vec![0usize; mesh.cells.len()];
        for r in &mesh.rooftops {
            let charge_minus = (1.0 / r.half_minus) * r.half_minus * r.width;
            let charge_plus = -(1.0 / r.half_plus) * r.half_plus * r.width;
            assert!((charge_minus + charge_plus).abs() < 1e-18);
            incidence[r.cell_minus] += 1;
            incidence[r.cell_plus] += 1;
        }
        // Each cell edge is either on the boundary or carries exactly one rooftop.
        let shared = count_shared_edges(&mesh.cells);
        assert_eq!(incidence.iter().sum::<usize>(), 2 * shared);
        assert!(incidence.iter().all(|&n| (1..=4).contains(&n)));
    }

    #[test]
    fn mirror_in_x_maps_mesh_to_itself() {
        let mesh = build_element_mesh(&PatchSpec::default()).unwrap();
        for r in &mesh.rooftops {
            let (hm, hp) = match r.direction {
                Direction::X => (r.half_plus, r.half_minus),
                Direction::Y => (r.half_minus, r.half_plus),
            };
            let found = mesh.rooftops.iter().any(|s| {
                s.direction == r.direction
                    && (s.center[0] + r.center[0]).abs() < 1e-12
                    && (s.center[1] - r.center[1]).abs() < 1e-12
                    && (s.half_minus - hm).abs() < 1e-12
                    && (s.half_plus - hp).abs() < 1e-12
                    && (s.width - r.width).abs() < 1e-12
            });
            assert!(found);
        }
    }

    #[test]
    fn rooftop_support_lies_in_metallization() {
        let mesh = build_element_mesh(&PatchSpec::default()).unwrap();
        let inside = |p: [f64; 2]| {
            mesh.cells
                .iter()
                .any(|c| p[0] >= c.x0 - 1e-15 && p[0] <= c.x1 + 1e-15 && p[1] >= c.y0 - 1e-15 && p[1] <= c.y1 + 1e-15)
        };
        for r in &mesh.rooftops {
            let (du, dv) = (r.half_plus, 0.5 * r.width);
            let corners = match r.direction {
                Direction::X => [[-r.half_minus, -dv], [du, dv], [-r.half_minus, dv], [du, -dv]],
                Direction::Y => [[-dv, -r.half_minus], [dv, du], [dv, -r.half_minus], [-dv, du]],
            };
            for c in corners {
                assert!(inside([r.center[0] + c[0], r.center[1] + c[1]]));
            }
        }
    }

    #[test]
    fn grid_layout_and_single_line() {
        let lambda0 = crate::consts::C0 / 24.125e9;
        let l = ArrayLayout::grid(25, 25, 0.58 * lambda0, 0.58 * lambda0).unwrap();
        assert_eq!(l.len(), 625);
        assert!((0.58 * lambda0 - 7.2076e-3).abs() < 1e-6);
        let single = ArrayLayout::parse("0 0\n").unwrap();
        assert_eq!((single.len(), single.d_max()), (1, 0.0));
    }

    #[test]
    fn random_layout_fits_square() {
        let lambda0 = crate::consts::C0 / 24.125e9;
        let l = ArrayLayout::random_in_square(100, 8.0 * lambda0, [6.6e-3, 6.3e-3], 7).unwrap();
        assert_eq!(l.len(), 100);
        assert!(l.d_max() <= 8.0 * lambda0);
    }

    #[test]
    fn parse_errors_report_line_numbers_and_duplicates() {
        match ArrayLayout::parse("# header\n0 0\n1 x\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            ArrayLayout::parse("0 0\n1e-3 0\n1e-3 5e-10\n"),
            Err(Error::DuplicatePosition { first: 1, second: 2 })
        ));
    }

    proptest! {
        #[test]
        fn layout_text_round_trip_is_bit_exact(pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..40)) {
            let positions: Vec<[f64; 2]> = pts.iter().enumerate().map(|(i, &(x, y))| [x + 3.0 * i as f64, y]).collect();
            let layout = ArrayLayout::new(positions).unwrap();
            let back = ArrayLayout::parse(&layout.to_text()).unwrap();
            for (a, b) in layout.positions.iter().zip(&back.positions) {
                prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
                prop_assert_eq!(a[1].to_bits(), b[1].to_bits());
            }
        }

        #[test]
        fn rooftop_count_matches_enumeration(side in 1usize..4, rows in 2usize..6, fc in 1usize..3, fr in 2usize..6) {
            let mut spec = PatchSpec::default();
            spec.mesh_density = MeshDensity { patch_side_cols: side, patch_rows: rows, feed_cols: fc, feed_rows: fr };
            let mesh = build_element_mesh(&spec).unwrap();
            prop_assert_eq!(mesh.num_rooftops(), count_shared_edges(&mesh.cells));
        }
    }
}
