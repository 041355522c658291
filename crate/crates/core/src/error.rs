use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("mesh error: {0}")]
    Mesh(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("positions {first} and {second} coincide (within 1e-9 m)")]
    DuplicatePosition { first: usize, second: usize },
    #[error("spectral sample too close to a pole at kx={kx}, ky={ky}")]
    PoleProximity { kx: num_complex::Complex64, ky: num_complex::Complex64 },
    #[error("MBF set rank deficient at secondary {secondary} (singular value ratio {ratio:e})")]
    RankDeficient { secondary: usize, ratio: f64 },
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("offset ({dx}, {dy}) m outside table range ±({x_m}, {y_m}) m")]
    OutOfRange { dx: f64, dy: f64, x_m: f64, y_m: f64 },
    #[error("requested Taylor order {requested} exceeds stored order {stored}")]
    OrderExceeded { requested: usize, stored: usize },
    #[error("FFT size {n} exceeds cap {cap}")]
    SizeCap { n: usize, cap: usize },
    #[error("layout extent {d_max} m exceeds table validity {valid} m")]
    Coverage { d_max: f64, valid: f64 },
    #[error("system is numerically singular (condition estimate {cond:e})")]
    Singular { cond: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("config: {0}")]
    Config(String),
    #[error("cache file: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
