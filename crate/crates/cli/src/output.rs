//! Snapshot, metrics, plot-script and manifest writers.
//!
//! Decimal output uses `{:.16e}` (17 significant digits), which round-trips
//! every finite `f64`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mesenchymal_core::kinetic::{CellField, FibreField, Grid, Invariants};
use mesenchymal_core::Exec;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Cell-centred fields of one time level.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotRecord {
    pub time: f64,
    pub nx: usize,
    pub ny: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub pbar: Vec<f64>,
    pub order: Vec<f64>,
    pub mean_dir: Vec<f64>,
}

impl SnapshotRecord {
    pub fn new(time: f64, p: &CellField, q: &FibreField, exec: Exec) -> Self {
        let grid = *p.grid();
        let (x, y) = (0..grid.cells()).map(|c| grid.center(c)).map(|c| (c[0], c[1])).unzip();
        Self {
            time,
            nx: grid.nx,
            ny: grid.ny,
            x,
            y,
            pbar: p.pbar(exec),
            order: q.order_parameter(),
            mean_dir: q.mean_direction(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.pbar.len() * 120);
        s.push_str("x,y,pbar,order,mean_dir\n");
        for i in 0..self.pbar.len() {
            let _ = writeln!(
                s,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.x[i], self.y[i], self.pbar[i], self.order[i], self.mean_dir[i]
            );
        }
        s
    }

    /// Parses [`SnapshotRecord::to_csv`] output. The time stamp and grid
    /// shape are not part of the CSV and must be supplied.
    pub fn from_csv(text: &str, time: f64, nx: usize, ny: usize) -> Result<Self, CliError> {
        let mut lines = text.lines();
        if lines.next() != Some("x,y,pbar,order,mean_dir") {
            return Err(CliError::Config("snapshot CSV: unexpected header".into()));
        }
        let mut cols: [Vec<f64>; 5] = Default::default();
        for (n, line) in lines.enumerate() {
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != 5 {
                return Err(CliError::Config(format!("snapshot CSV line {}: expected 5 columns", n + 2)));
            }
            for (col, v) in cols.iter_mut().zip(vals) {
                col.push(v.parse().map_err(|_| {
                    CliError::Config(format!("snapshot CSV line {}: bad number `{v}`", n + 2))
                })?);
            }
        }
        if cols[0].len() != nx * ny {
            return Err(CliError::Config(format!(
                "snapshot CSV has {} rows, grid has {}",
                cols[0].len(),
                nx * ny
            )));
        }
        let [x, y, pbar, order, mean_dir] = cols;
        Ok(Self { time, nx, ny, x, y, pbar, order, mean_dir })
    }
}

/// Header of a binary state dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpHeader {
    pub time: f64,
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub n_speeds: usize,
    pub n_theta: usize,
}

const LAYOUT: &str = "f64 little-endian, index ((k * n_theta + j) * ny + iy) * nx + ix";

impl DumpHeader {
    pub fn of(p: &CellField, time: f64) -> Self {
        let g = p.grid();
        Self { time, nx: g.nx, ny: g.ny, dx: g.dx, dy: g.dy, n_speeds: p.n_speeds(), n_theta: p.n_theta() }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.n_speeds * self.n_theta
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_text(&self) -> String {
        format!(
            "time = {:.16e}\nnx = {}\nny = {}\ndx = {:.16e}\ndy = {:.16e}\nn_speeds = {}\nn_theta = {}\nlayout = {LAYOUT}\n",
            self.time, self.nx, self.ny, self.dx, self.dy, self.n_speeds, self.n_theta
        )
    }

    fn parse(text: &str) -> Result<Self, CliError> {
        let get = |key: &str| -> Result<String, CliError> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
                .ok_or_else(|| CliError::Config(format!("dump header: missing `{key}`")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: String) -> Result<T, CliError> {
            v.parse().map_err(|_| CliError::Config(format!("dump header: bad `{key}` = {v}")))
        }
        Ok(Self {
            time: num("time", get("time")?)?,
            nx: num("nx", get("nx")?)?,
            ny: num("ny", get("ny")?)?,
            dx: num("dx", get("dx")?)?,
            dy: num("dy", get("dy")?)?,
            n_speeds: num("n_speeds", get("n_speeds")?)?,
            n_theta: num("n_theta", get("n_theta")?)?,
        })
    }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("hdr")
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes the full state to `path` and its header to `path` with `.hdr`.
pub fn write_dump(path: &Path, p: &CellField, time: f64) -> Result<(), CliError> {
    let bytes: Vec<u8> = p.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
    write_text(&sidecar(path), &DumpHeader::of(p, time).to_text())
}

pub fn read_dump(path: &Path) -> Result<(DumpHeader, Vec<f64>), CliError> {
    let hdr_path = sidecar(path);
    let text = fs::read_to_string(&hdr_path).map_err(|e| CliError::io(&hdr_path, e))?;
    let header = DumpHeader::parse(&text)?;
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.len() != 8 * header.len() {
        return Err(CliError::Config(format!(
            "{}: {} bytes, header implies {}",
            path.display(),
            bytes.len(),
            8 * header.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, data))
}

/// Streams `time,total_mass,min_q_norm,max_q_norm,min_p` rows.
pub struct MetricsWriter {
    path: PathBuf,
    file: fs::File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let mut file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        writeln!(file, "time,total_mass,min_q_norm,max_q_norm,min_p").map_err(|e| CliError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn row(&mut self, time: f64, inv: &Invariants) -> Result<(), CliError> {
        writeln!(
            self.file,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            time, inv.total_mass, inv.q_norm_min, inv.q_norm_max, inv.p_min
        )
        .map_err(|e| CliError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        self.file.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Gnuplot script drawing `pbar` as a heat map and the order parameter with
/// mean-direction bars for one snapshot file.
pub fn plot_script(snapshot: &str, grid: &Grid, title: &str) -> String {
    let bar = 0.4 * grid.dx.min(grid.dy);
    format!(
        "set datafile separator ','\n\
         set terminal pngcairo size 1200,540\n\
         set output '{stem}.png'\n\
         set multiplot layout 1,2 title '{title}'\n\
         set size ratio -1\n\
         set xrange [0:{lx}]\n\
         set yrange [0:{ly}]\n\
         set title 'cell mass density'\n\
         plot '{snapshot}' skip 1 using 1:2:3 with image notitle\n\
         set title 'alignment and mean fibre direction'\n\
         set cbrange [0:0.5]\n\
         plot '{snapshot}' skip 1 using 1:2:4 with image notitle, \\\n\
         \x20    '' skip 1 using ($1-{bar}*cos($5)):($2-{bar}*sin($5)):(2*{bar}*cos($5)):(2*{bar}*sin($5)) \\\n\
         \x20    with vectors nohead lc rgb 'white' notitle\n\
         unset multiplot\n",
        stem = snapshot.trim_end_matches(".csv"),
        lx = grid.lx(),
        ly = grid.ly(),
    )
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `key = value` lines, written last so a complete manifest marks a
/// complete run.
#[derive(Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, config_text: &str) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m.set("version", VERSION);
        m.set("config_sha256", sha256_hex(config_text.as_bytes()));
        m.set("parallel", Exec::Parallel.is_parallel());
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        write_text(path, &s)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}
