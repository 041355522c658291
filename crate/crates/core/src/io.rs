//! Binary cache files.
//!
//! Both formats are a header of little-endian 64-bit fields followed by
//! little-endian complex doubles (real, imaginary).
//!
//! * MBF cache: magic, version, element hash, substrate hash, M, B, then Q
//!   column by column.
//! * Table file: magic, version, element hash, substrate hash, MBF-set hash,
//!   γ, order, n, k_max, pad, M_t, M_b; then per MBF pair (row-major) the
//!   table layout (len, spacing, origin, valid) and its monomial grids. Pairs
//!   are written and read one at a time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use faer::Mat;
use num_complex::Complex64 as C;

use crate::array::TableSource;
use crate::cfft::{monomials, InteractionTable, SpectralGrid};
use crate::error::{Error, Result};
use crate::geometry::ElementMesh;
use crate::mbf::MbfSet;

const MBF_MAGIC: u64 = u64::from_le_bytes(*b"MBFQ0001");
const TABLE_MAGIC: u64 = u64::from_le_bytes(*b"CFFTTAB1");
const VERSION: u64 = 1;

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    put_u64(w, v.to_bits())
}

fn put_c(w: &mut impl Write, v: C) -> Result<()> {
    put_f64(w, v.re)?;
    put_f64(w, v.im)
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Cache(format!("truncated file: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn get_c(r: &mut impl Read) -> Result<C> {
    Ok(C::new(get_f64(r)?, get_f64(r)?))
}

fn expect(what: &str, found: u64, want: u64) -> Result<()> {
    if found == want {
        Ok(())
    } else {
        Err(Error::Cache(format!("{what} mismatch: file has {found:#x}, expected {want:#x}")))
    }
}

/// Writes Q with the hashes that identify it.
pub fn write_mbf_cache(path: &Path, set: &MbfSet, element_hash: u64, substrate_hash: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in [MBF_MAGIC, VERSION, element_hash, substrate_hash, set.num_mbfs() as u64, set.num_rooftops() as u64] {
        put_u64(&mut w, v)?;
    }
    for j in 0..set.q.ncols() {
        for i in 0..set.q.nrows() {
            put_c(&mut w, set.q[(i, j)])?;
        }
    }
    Ok(w.flush()?)
}

/// Reads Q back, rejecting files written for another element or substrate.
pub fn read_mbf_cache(path: &Path, mesh: Arc<ElementMesh>, element_hash: u64, substrate_hash: u64) -> Result<MbfSet> {
    let mut r = BufReader::new(File::open(path)?);
    expect("magic", get_u64(&mut r)?, MBF_MAGIC)?;
    expect("version", get_u64(&mut r)?, VERSION)?;
    expect("element hash", get_u64(&mut r)?, element_hash)?;
    expect("substrate hash", get_u64(&mut r)?, substrate_hash)?;
    let m = get_u64(&mut r)? as usize;
    let b = get_u64(&mut r)? as usize;
    expect("rooftop count", b as u64, mesh.num_rooftops() as u64)?;
    if m == 0 || m > 64 {
        return Err(Error::Cache(format!("implausible MBF count {m}")));
    }
    let mut q = Mat::<C>::zeros(b, m);
    for j in 0..m {
        for i in 0..b {
            q[(i, j)] = get_c(&mut r)?;
        }
    }
    MbfSet::from_matrix(mesh, q)
}

/// Identity and grid of a table file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableHeader {
    pub element_hash: u64,
    pub substrate_hash: u64,
    pub mbf_hash: u64,
    pub gamma: f64,
    pub order: usize,
    pub grid: SpectralGrid,
    pub pad: usize,
    pub m_t: usize,
    pub m_b: usize,
}

/// Sequential writer; pairs must arrive in row-major order.
pub struct TableWriter {
    w: BufWriter<File>,
    header: TableHeader,
    next: usize,
}

impl TableWriter {
    pub fn create(path: &Path, header: TableHeader) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        let h = &header;
        for v in [
            TABLE_MAGIC,
            VERSION,
            h.element_hash,
            h.substrate_hash,
            h.mbf_hash,
            h.gamma.to_bits(),
            h.order as u64,
            h.grid.n as u64,
            h.grid.k_max.to_bits(),
            h.pad as u64,
            h.m_t as u64,
            h.m_b as u64,
        ] {
            put_u64(&mut w, v)?;
        }
        Ok(TableWriter { w, header, next: 0 })
    }

    pub fn write(&mut self, i: usize, j: usize, t: &InteractionTable) -> Result<()> {
        let h = &self.header;
        if i * h.m_b + j != self.next || i >= h.m_t || j >= h.m_b {
            return Err(Error::Cache(format!("pair ({i}, {j}) written out of order")));
        }
        if t.order != h.order || t.num_monomials() != monomials(h.order).len() {
            return Err(Error::Cache(format!("table order {} differs from header order {}", t.order, h.order)));
        }
        put_u64(&mut self.w, t.len as u64)?;
        put_f64(&mut self.w, t.spacing)?;
        put_f64(&mut self.w, t.origin)?;
        put_f64(&mut self.w, t.valid)?;
        for g in &t.grids {
            for &v in g {
                put_c(&mut self.w, v)?;
            }
        }
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        let h = &self.header;
        if self.next != h.m_t * h.m_b {
            return Err(Error::Cache(format!("only {} of {} pairs written", self.next, h.m_t * h.m_b)));
        }
        Ok(self.w.flush()?)
    }
}

/// Reader streaming one pair's table at a time.
pub struct TableReader {
    path: PathBuf,
    pub header: TableHeader,
    data_start: u64,
}

impl TableReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        expect("magic", get_u64(&mut r)?, TABLE_MAGIC)?;
        expect("version", get_u64(&mut r)?, VERSION)?;
        let element_hash = get_u64(&mut r)?;
        let substrate_hash = get_u64(&mut r)?;
        let mbf_hash = get_u64(&mut r)?;
        let gamma = get_f64(&mut r)?;
        let order = get_u64(&mut r)? as usize;
        let n = get_u64(&mut r)? as usize;
        let k_max = get_f64(&mut r)?;
        let pad = get_u64(&mut r)? as usize;
        let m_t = get_u64(&mut r)? as usize;
        let m_b = get_u64(&mut r)? as usize;
        if order > 3 || m_t == 0 || m_b == 0 {
            return Err(Error::Cache(format!("implausible header: order {order}, {m_t}x{m_b} pairs")));
        }
        let grid = SpectralGrid::new(n, k_max).map_err(|e| Error::Cache(e.to_string()))?;
        let header = TableHeader { element_hash, substrate_hash, mbf_hash, gamma, order, grid, pad, m_t, m_b };
        Ok(TableReader { path: path.to_path_buf(), header, data_start: 12 * 8 })
    }

    /// Errors unless the file was built for these inputs.
    pub fn check(&self, element_hash: u64, substrate_hash: u64, mbf_hash: u64, gamma: f64) -> Result<()> {
        expect("element hash", self.header.element_hash, element_hash)?;
        expect("substrate hash", self.header.substrate_hash, substrate_hash)?;
        expect("MBF hash", self.header.mbf_hash, mbf_hash)?;
        expect("gamma", self.header.gamma.to_bits(), gamma.to_bits())
    }

    fn read_table(&self, r: &mut impl Read) -> Result<InteractionTable> {
        let len = get_u64(r)? as usize;
        let spacing = get_f64(r)?;
        let origin = get_f64(r)?;
        let valid = get_f64(r)?;
        if len == 0 || len > 1 << 16 {
            return Err(Error::Cache(format!("implausible table length {len}")));
        }
        let count = monomials(self.header.order).len();
        let mut grids = Vec::with_capacity(count);
        let mut buf = vec![0u8; len * len * 16];
        for _ in 0..count {
            r.read_exact(&mut buf).map_err(|e| Error::Cache(format!("truncated table: {e}")))?;
            let g = buf
                .chunks_exact(16)
                .map(|c| {
                    let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
                    let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
                    C::new(re, im)
                })
                .collect();
            grids.push(g);
        }
        Ok(InteractionTable { order: self.header.order, len, spacing, origin, valid, grids })
    }
}

impl TableSource for TableReader {
    fn dims(&self) -> (usize, usize) {
        (self.header.m_t, self.header.m_b)
    }

    fn for_each(&mut self, f: &mut dyn FnMut(usize, usize, &InteractionTable) -> Result<()>) -> Result<()> {
        let mut r = BufReader::new(File::open(&self.path)?);
        r.seek(SeekFrom::Start(self.data_start))?;
        for i in 0..self.header.m_t {
            for j in 0..self.header.m_b {
                let t = self.read_table(&mut r)?;
                f(i, j, &t)?;
            }
        }
        Ok(())
    }
}
