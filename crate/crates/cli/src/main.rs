use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cfft_mbf::array::{
    assemble_reduced, contour_height_sweep, radiation_pattern, solve_and_port_currents, AssemblyParts, CfftBlocks, ComputedTables, DirectBlocks,
    Excitation, FarField, LayeredBlocks, Plane, ReducedSystem,
};
use cfft_mbf::cfft::{build_spectral_grid, tabulate_pairs, SpectralGrid};
use cfft_mbf::config::Config;
use cfft_mbf::homog::HomogReducer;
use cfft_mbf::io::{read_mbf_cache, write_mbf_cache, TableHeader, TableReader, TableWriter};
use cfft_mbf::mbf::{generate_mbfs, DirectIntegrator, ElementModel, MbfSet, SelfBlockCache};
use cfft_mbf::{c64, geometry::load_array_layout, ArrayLayout, Error};

/// Reduced MoM analysis of printed antenna arrays with contour-FFT tables.
#[derive(Parser)]
#[command(name = "cfft-mbf", version)]
struct Cli {
    /// key = value configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for CSV outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// MBF cache file.
    #[arg(long, global = true, default_value = "mbf_cache.bin")]
    mbf_cache: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the configuration and print it in canonical form.
    Validate {
        /// Also run the contour-height study for MBF pair (0, 0) and write table1.csv.
        #[arg(long)]
        table1: bool,
        /// Offset of the study along x and y, in free-space wavelengths.
        #[arg(long, default_value_t = 15.0)]
        offset_lambda: f64,
        /// FFT size of the study.
        #[arg(long, default_value_t = 1024)]
        n: usize,
    },
    /// Print the surface-wave poles as β_p/k0, one per line.
    Poles,
    /// Load or generate the element's macro basis functions.
    Mbf {
        /// Regenerate even if a matching cache exists.
        #[arg(long)]
        regen: bool,
    },
    /// Tabulate all MBF pair reactions for a layout extent.
    Tabulate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        layout: LayoutArgs,
        /// Extent to cover (m) instead of a layout.
        #[arg(long, conflicts_with_all = ["layout", "grid"])]
        d_max: Option<f64>,
    },
    /// Assemble and solve an array, writing port currents and patterns.
    Analyze {
        #[command(flatten)]
        layout: LayoutArgs,
        /// Table file from `tabulate`; tables are computed on the fly otherwise.
        #[arg(long, conflicts_with = "direct")]
        table: Option<PathBuf>,
        /// Use direct contour integration for every block.
        #[arg(long)]
        direct: bool,
        #[command(flatten)]
        excitation: ExcitationArgs,
        /// Angular step of the pattern cuts (degrees).
        #[arg(long, default_value_t = 1.0)]
        angle_step: f64,
    },
}

#[derive(Args)]
struct LayoutArgs {
    /// Layout file: one `X Y` per line in meters.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Regular grid: NX NY SPACING_X SPACING_Y (m).
    #[arg(long, num_args = 4, value_names = ["NX", "NY", "SX", "SY"])]
    grid: Option<Vec<String>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Drive {
    Center,
    Uniform,
}

#[derive(Args)]
struct ExcitationArgs {
    /// Excite one element by index.
    #[arg(long, conflicts_with_all = ["drive", "weights"])]
    excite: Option<usize>,
    #[arg(long, value_enum, conflicts_with = "weights")]
    drive: Option<Drive>,
    /// Per-element complex volts, one `RE IM` per line.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl LayoutArgs {
    fn given(&self) -> bool {
        self.layout.is_some() || self.grid.is_some()
    }

    fn load(&self) -> Result<ArrayLayout> {
        match (&self.layout, &self.grid) {
            (Some(p), None) => Ok(load_array_layout(p)?),
            (None, Some(g)) => {
                let nx: usize = g[0].parse().context("NX")?;
                let ny: usize = g[1].parse().context("NY")?;
                let sx: f64 = g[2].parse().context("SPACING_X")?;
                let sy: f64 = g[3].parse().context("SPACING_Y")?;
                Ok(ArrayLayout::grid(nx, ny, sx, sy)?)
            }
            (Some(_), Some(_)) => Err(Error::Config("give either --layout or --grid, not both".into()).into()),
            (None, None) => Err(Error::Config("a layout is required (--layout or --grid)".into()).into()),
        }
    }
}

impl ExcitationArgs {
    fn resolve(&self, layout: &ArrayLayout) -> Result<Excitation> {
        if let Some(e) = self.excite {
            return Ok(Excitation::Single(e));
        }
        if let Some(p) = &self.weights {
            return Ok(Excitation::Weights(read_weights(p)?));
        }
        Ok(match self.drive {
            Some(Drive::Uniform) => Excitation::Uniform,
            _ => Excitation::Single(center_element(layout)),
        })
    }
}

fn read_weights(path: &Path) -> Result<Vec<c64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Parse { line: i + 1, msg: format!("expected `RE IM`, got `{line}`") };
        if parts.len() != 2 {
            return Err(bad().into());
        }
        let re: f64 = parts[0].parse().map_err(|_| bad())?;
        let im: f64 = parts[1].parse().map_err(|_| bad())?;
        out.push(c64::new(re, im));
    }
    Ok(out)
}

fn center_element(layout: &ArrayLayout) -> usize {
    let n = layout.positions.len() as f64;
    let c = layout.positions.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    let d = |p: &[f64; 2]| (p[0] - c[0]).hypot(p[1] - c[1]);
    (0..layout.positions.len()).min_by(|&a, &b| d(&layout.positions[a]).total_cmp(&d(&layout.positions[b]))).unwrap_or(0)
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Hash of everything the MBF set depends on.
fn element_hash(model: &ElementModel, cfg: &Config) -> u64 {
    let mut h = DefaultHasher::new();
    model.content_hash().hash(&mut h);
    model.load.to_bits().hash(&mut h);
    cfg.ring_spacing().to_bits().hash(&mut h);
    cfg.secondaries.hash(&mut h);
    h.finish()
}

struct Session {
    cfg: Config,
    model: ElementModel,
    set: MbfSet,
}

impl Session {
    fn open(cli: &Cli, regen: bool) -> Result<Self> {
        let cfg = load_config(cli.config.as_deref())?;
        let model = cfg.element_model()?;
        let eh = element_hash(&model, &cfg);
        let sh = cfg.substrate.content_hash();
        let cached = if regen { None } else { read_mbf_cache(&cli.mbf_cache, model.mesh.clone(), eh, sh).ok() };
        let set = match cached {
            Some(s) => s,
            None => {
                eprintln!("generating MBFs ({} rooftops)", model.mesh.num_rooftops());
                let s = generate_mbfs(&model, cfg.ring_spacing(), cfg.secondaries)?;
                write_mbf_cache(&cli.mbf_cache, &s, eh, sh)?;
                s
            }
        };
        Ok(Session { cfg, model, set })
    }

    fn header(&self, grid: SpectralGrid) -> TableHeader {
        let m = self.set.num_mbfs();
        TableHeader {
            element_hash: element_hash(&self.model, &self.cfg),
            substrate_hash: self.cfg.substrate.content_hash(),
            mbf_hash: self.set.content_hash(),
            gamma: self.cfg.gamma,
            order: self.cfg.taylor_order,
            grid,
            pad: self.cfg.cfft().pad,
            m_t: m,
            m_b: m,
        }
    }

    fn grid_for(&self, d_max: f64) -> Result<SpectralGrid> {
        let c = self.cfg.cfft();
        Ok(build_spectral_grid(d_max, &self.cfg.substrate, c.oversampling, self.cfg.contour().beta_max, c.size_cap)?)
    }
}

fn create(dir: &Path, name: &str) -> Result<fs::File> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    fs::File::create(&p).with_context(|| format!("creating {}", p.display()))
}

fn write_timing(dir: &Path, rows: &[(&str, Duration)]) -> Result<()> {
    let mut f = create(dir, "timing.csv")?;
    writeln!(f, "phase,seconds")?;
    for (phase, d) in rows {
        writeln!(f, "{phase},{:.6}", d.as_secs_f64())?;
    }
    Ok(())
}

fn validate(cli: &Cli, table1: bool, offset_lambda: f64, n: usize) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    print!("{}", cfg.to_text());
    let mesh = cfg.mesh()?;
    println!("# lambda0_m = {:.9e}", cfg.substrate.lambda0());
    println!("# rooftops = {}", mesh.num_rooftops());
    println!("# surface_wave_poles = {}", cfg.greens().locate_surface_wave_poles().len());
    if !table1 {
        return Ok(());
    }
    let s = Session::open(cli, false)?;
    let l0 = cfg.substrate.lambda0();
    let offset = [offset_lambda * l0, offset_lambda * l0];
    let contour = cfg.contour();
    let direct = DirectIntegrator::new(cfg.greens(), contour);
    let reference = direct.layered_block(&s.set, &s.set, offset[0], offset[1])?.values[(0, 0)];
    let grid = SpectralGrid::new(n, contour.beta_max)?;
    let gammas = [1.0 / 100.0, 1.0 / 130.0, 1.0 / 200.0, 1.0 / 400.0];
    let rows = contour_height_sweep(&cfg.greens(), contour.beta_max, grid, cfg.cfft().pad, &s.set, (0, 0), offset, reference, &gammas, cfg.taylor_order)?;
    let mut f = create(&cli.out_dir, "table1.csv")?;
    writeln!(f, "gamma,order,error_dB")?;
    for r in rows {
        writeln!(f, "{:.9},{},{:.2}", r.gamma, r.order, r.error_db)?;
    }
    Ok(())
}

fn tabulate(cli: &Cli, out: &Path, layout: &LayoutArgs, d_max: Option<f64>) -> Result<()> {
    let s = Session::open(cli, false)?;
    let d_max = match d_max {
        Some(d) => d,
        None if layout.given() => layout.load()?.d_max(),
        None => bail!(Error::Config("tabulate needs --layout, --grid or --d-max".into())),
    };
    let grid = s.grid_for(d_max)?;
    eprintln!("tabulating {} pairs on a {}x{} grid", s.set.num_mbfs().pow(2), grid.n, grid.n);
    let mut w = TableWriter::create(out, s.header(grid))?;
    let timing = tabulate_pairs(&s.cfg.greens(), s.cfg.contour(), grid, &s.set, &s.set, &s.cfg.cfft(), d_max, |i, j, t| w.write(i, j, &t))?;
    w.finish()?;
    write_timing(&cli.out_dir, &[("sampling", timing.sampling), ("fft", timing.fft)])
}

fn analyze(cli: &Cli, layout: &LayoutArgs, table: Option<&Path>, direct: bool, exc: &ExcitationArgs, step: f64) -> Result<()> {
    if !(step > 0.0 && step <= 10.0) {
        bail!(Error::Config(format!("angle step {step} must lie in (0, 10] degrees")));
    }
    let s = Session::open(cli, false)?;
    let layout = layout.load()?;
    let excitation = exc.resolve(&layout)?;
    let t = Instant::now();
    let self_block = SelfBlockCache::new().self_block_traditional(&s.model, &s.set)?.values;
    let t_self = t.elapsed();
    let homog = HomogReducer::new(s.model.homog, &s.set, &s.set);
    let parts = AssemblyParts { set: &s.set, self_block: &self_block, homog: Some(&homog), load: s.cfg.load_ohm };
    let order = s.cfg.taylor_order;
    let mut timing = vec![("self_block", t_self)];
    let sys: ReducedSystem = if direct {
        let t = Instant::now();
        let pair = DirectIntegrator::new(s.cfg.greens(), s.cfg.contour()).prepare(&s.set, &s.set, layout.d_max() * std::f64::consts::SQRT_2)?;
        timing.push(("direct_prepare", t.elapsed()));
        assemble(&layout, &parts, &mut DirectBlocks { pair: &pair }, &excitation)?
    } else if let Some(p) = table {
        let reader = TableReader::open(p)?;
        reader.check(element_hash(&s.model, &s.cfg), s.cfg.substrate.content_hash(), s.set.content_hash(), s.cfg.gamma)?;
        let order = order.min(reader.header.order);
        let mut blocks = CfftBlocks::new(reader, order);
        let sys = assemble(&layout, &parts, &mut blocks, &excitation)?;
        timing.push(("lookup", blocks.fill_time));
        sys
    } else {
        let d_max = layout.d_max();
        let source = ComputedTables {
            greens: s.cfg.greens(),
            contour: s.cfg.contour(),
            grid: s.grid_for(d_max)?,
            set: &s.set,
            cfg: s.cfg.cfft(),
            cover: d_max,
            timing: Default::default(),
        };
        let mut blocks = CfftBlocks::new(source, order);
        let sys = assemble(&layout, &parts, &mut blocks, &excitation)?;
        timing.push(("sampling", blocks.source.timing.sampling));
        timing.push(("fft", blocks.source.timing.fft));
        timing.push(("lookup", blocks.fill_time));
        sys
    };
    timing.push(("homogeneous", sys.timing.homogeneous));
    timing.push(("layered", sys.timing.layered));
    timing.push(("assembly", sys.timing.total));
    let t = Instant::now();
    let sol = solve_and_port_currents(&sys)?;
    timing.push(("solve", t.elapsed()));

    let mut f = create(&cli.out_dir, "port_currents.csv")?;
    writeln!(f, "element_index,X,Y,Re(I),Im(I)")?;
    for (e, (p, i)) in layout.positions.iter().zip(&sol.port_currents).enumerate() {
        writeln!(f, "{e},{:.9e},{:.9e},{:.8e},{:.8e}", p[0], p[1], i.re, i.im)?;
    }

    let t = Instant::now();
    let field = FarField::new(&s.set, &layout, &sol.coeffs, s.cfg.substrate)?;
    let count = (180.0 / step).round() as usize;
    let angles: Vec<f64> = (0..=count).map(|k| -90.0 + 180.0 * k as f64 / count as f64).collect();
    for plane in [Plane::E, Plane::H] {
        let samples = radiation_pattern(&field, plane, &angles)?;
        let mut f = create(&cli.out_dir, &format!("pattern_{}.csv", plane.tag()))?;
        writeln!(f, "angle_deg,directivity_dBi")?;
        for (a, smp) in angles.iter().zip(samples) {
            writeln!(f, "{a:.3},{:.2}", smp.directivity)?;
        }
    }
    timing.push(("pattern", t.elapsed()));
    write_timing(&cli.out_dir, &timing)?;
    eprintln!("solved {} elements x {} MBFs", layout.len(), s.set.num_mbfs());
    Ok(())
}

fn assemble(layout: &ArrayLayout, parts: &AssemblyParts<'_>, blocks: &mut dyn LayeredBlocks, exc: &Excitation) -> Result<ReducedSystem> {
    Ok(assemble_reduced(layout, parts, blocks, exc)?)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Validate { table1, offset_lambda, n } => validate(cli, *table1, *offset_lambda, *n),
        Command::Poles => {
            let cfg = load_config(cli.config.as_deref())?;
            let k0 = cfg.substrate.k0();
            for b in cfg.greens().locate_surface_wave_poles() {
                println!("{:.9}", b / k0);
            }
            Ok(())
        }
        Command::Mbf { regen } => {
            let s = Session::open(cli, *regen)?;
            println!("mbfs = {}", s.set.num_mbfs());
            println!("rooftops = {}", s.set.num_rooftops());
            println!("cache = {}", cli.mbf_cache.display());
            Ok(())
        }
        Command::Tabulate { out, layout, d_max } => tabulate(cli, out, layout, *d_max),
        Command::Analyze { layout, table, direct, excitation, angle_step } => analyze(cli, layout, table.as_deref(), *direct, excitation, *angle_step),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parse { .. } | Error::InvalidSpec(_) | Error::Mesh(_) | Error::DuplicatePosition { .. } | Error::Cache(_)) => 2,
        Some(Error::Coverage { .. } | Error::SizeCap { .. } | Error::OutOfRange { .. } | Error::OrderExceeded { .. }) => 3,
        Some(Error::Io(_)) | None => 1,
        Some(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
