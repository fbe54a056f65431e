//! Training pairs `(x, u)` with `u = x(t+Δt) − x(t)`.
//!
//! Rows are stored flat. The input of a row is the state, followed by the
//! time within the forcing period for non-autonomous systems.
//!
//! Two interchangeable file formats are supported. The text format:
//!
//! ```text
//! #deepode-dataset v1 dim=2 dt=0.1 autonomous=1
//! x0,x1,u0,u1,provenance
//! 3.0000000000000000e0,2.0000000000000000e0,...,mc
//! ```
//!
//! and a little-endian binary container: the magic `DPD1`, a header
//! (`u32` version, `u32` dim, `u8` autonomous, `f64` dt, `u64` rows), then
//! rows of `f64` laid out as inputs, labels and a provenance code
//! (`-1` manifold, `0` Monte Carlo root, `i` evolution step `i`).

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::integrate::fmt_f64;

pub const TEXT_MAGIC: &str = "#deepode-dataset";
pub const BINARY_MAGIC: &[u8; 4] = b"DPD1";
pub const FORMAT_VERSION: u32 = 1;

/// Where a row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Manifold,
    /// Monte Carlo root, step 0 of an evolution chain.
    Mc,
    /// `i`-th evolution step of a chain, `i ≥ 1`.
    Evolution(u32),
}

impl Provenance {
    /// Chain step index: 0 for roots and manifold rows.
    pub fn step(self) -> u32 {
        match self {
            Provenance::Evolution(i) => i,
            _ => 0,
        }
    }

    fn code(self) -> f64 {
        match self {
            Provenance::Manifold => -1.0,
            Provenance::Mc => 0.0,
            Provenance::Evolution(i) => i as f64,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        if c == -1.0 {
            Ok(Provenance::Manifold)
        } else if c == 0.0 {
            Ok(Provenance::Mc)
        } else if c >= 1.0 && c.fract() == 0.0 && c <= u32::MAX as f64 {
            Ok(Provenance::Evolution(c as u32))
        } else {
            Err(Error::Format(format!("invalid provenance code {c}")))
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Manifold => f.write_str("manifold"),
            Provenance::Mc => f.write_str("mc"),
            Provenance::Evolution(i) => write!(f, "evolution_step_{i}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manifold" => Ok(Provenance::Manifold),
            "mc" => Ok(Provenance::Mc),
            _ => s
                .strip_prefix("evolution_step_")
                .and_then(|i| i.parse::<u32>().ok())
                .filter(|&i| i >= 1)
                .map(Provenance::Evolution)
                .ok_or_else(|| Error::Format(format!("unknown provenance '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Text,
    Binary,
}

impl FromStr for FileFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" | "csv" => Ok(FileFormat::Text),
            "binary" | "bin" | "dpd1" => Ok(FileFormat::Binary),
            _ => Err(Error::Config(format!("unknown dataset format '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    dt: f64,
    autonomous: bool,
    inputs: Vec<f64>,
    labels: Vec<f64>,
    provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn new(dim: usize, dt: f64, autonomous: bool) -> Self {
        Self {
            dim,
            dt,
            autonomous,
            inputs: Vec::new(),
            labels: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn is_autonomous(&self) -> bool {
        self.autonomous
    }

    /// Width of an input row: `dim`, plus one time column when non-autonomous.
    pub fn in_dim(&self) -> usize {
        self.dim + usize::from(!self.autonomous)
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// Appends a row. `t` is required exactly when the dataset is non-autonomous.
    pub fn push(&mut self, x: &[f64], t: Option<f64>, u: &[f64], prov: Provenance) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        if u.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: u.len(),
            });
        }
        if t.is_some() == self.autonomous {
            return Err(Error::Config(if self.autonomous {
                "autonomous dataset rows carry no time".into()
            } else {
                "non-autonomous dataset rows need a time".into()
            }));
        }
        self.inputs.extend_from_slice(x);
        if let Some(t) = t {
            self.inputs.push(t);
        }
        self.labels.extend_from_slice(u);
        self.provenance.push(prov);
        Ok(())
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let w = self.in_dim();
        &self.inputs[i * w..(i + 1) * w]
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.input(i)[..self.dim]
    }

    pub fn time(&self, i: usize) -> Option<f64> {
        (!self.autonomous).then(|| self.input(i)[self.dim])
    }

    pub fn label(&self, i: usize) -> &[f64] {
        &self.labels[i * self.dim..(i + 1) * self.dim]
    }

    pub fn provenance(&self, i: usize) -> Provenance {
        self.provenance[i]
    }

    pub fn provenances(&self) -> &[Provenance] {
        &self.provenance
    }

    /// Row-major inputs, `len() × in_dim()`.
    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    /// Row-major labels, `len() × dim()`.
    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    fn check_compatible(&self, other: &Dataset) -> Result<()> {
        if self.dim != other.dim || self.autonomous != other.autonomous {
            return Err(Error::Dimension {
                expected: self.in_dim(),
                got: other.in_dim(),
            });
        }
        if self.dt != other.dt {
            return Err(Error::DtMismatch {
                model: self.dt,
                requested: other.dt,
            });
        }
        Ok(())
    }

    /// Appends every row of `other`.
    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        self.check_compatible(other)?;
        self.inputs.extend_from_slice(&other.inputs);
        self.labels.extend_from_slice(&other.labels);
        self.provenance.extend_from_slice(&other.provenance);
        Ok(())
    }

    /// Rows for which `keep(i)` holds, in order.
    pub fn filter_rows(&self, mut keep: impl FnMut(usize) -> bool) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        self.select(&idx)
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.dim, self.dt, self.autonomous);
        for &i in indices {
            out.inputs.extend_from_slice(self.input(i));
            out.labels.extend_from_slice(self.label(i));
            out.provenance.push(self.provenance[i]);
        }
        out
    }

    /// The first `n` rows.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        self.select(&idx)
    }

    fn header_line(&self) -> String {
        format!(
            "{TEXT_MAGIC} v{FORMAT_VERSION} dim={} dt={:?} autonomous={}",
            self.dim,
            self.dt,
            u8::from(self.autonomous)
        )
    }

    fn column_names(&self) -> Vec<String> {
        let mut cols: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        if !self.autonomous {
            cols.push("t".into());
        }
        cols.extend((0..self.dim).map(|j| format!("u{j}")));
        cols.push("provenance".into());
        cols
    }

    pub fn write_text<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "{}", self.header_line())?;
        writeln!(w, "{}", self.column_names().join(","))?;
        for i in 0..self.len() {
            for v in self.input(i).iter().chain(self.label(i)) {
                write!(w, "{},", fmt_f64(*v))?;
            }
            writeln!(w, "{}", self.provenance[i])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_text<R: Read>(r: R) -> Result<Dataset> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let mut ds = parse_text_header(&header)?;
        let cols = lines
            .next()
            .ok_or_else(|| Error::Format("missing column header".into()))??;
        if cols.trim() != ds.column_names().join(",") {
            return Err(Error::Format(format!("unexpected column header '{cols}'")));
        }
        let width = ds.in_dim() + ds.dim;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != width + 1 {
                return Err(Error::Format(format!(
                    "row {}: expected {} fields, found {}",
                    lineno + 1,
                    width + 1,
                    fields.len()
                )));
            }
            let mut vals = Vec::with_capacity(width);
            for f in &fields[..width] {
                vals.push(f.parse::<f64>().map_err(|e| {
                    Error::Format(format!("row {}: bad number '{f}': {e}", lineno + 1))
                })?);
            }
            ds.inputs.extend_from_slice(&vals[..ds.in_dim()]);
            ds.labels.extend_from_slice(&vals[ds.in_dim()..]);
            ds.provenance.push(fields[width].parse()?);
        }
        Ok(ds)
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&[u8::from(self.autonomous)])?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for i in 0..self.len() {
            for v in self.input(i).iter().chain(self.label(i)) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&self.provenance[i].code().to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(r: R) -> Result<Dataset> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Format("missing DPD1 magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let dim = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let autonomous = match read_array::<1>(&mut r)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("invalid autonomous flag {b}"))),
        };
        let dt = f64::from_le_bytes(read_array(&mut r)?);
        let rows = u64::from_le_bytes(read_array(&mut r)?) as usize;
        check_header(dim, dt)?;
        let mut ds = Dataset::new(dim, dt, autonomous);
        let in_dim = ds.in_dim();
        for _ in 0..rows {
            for _ in 0..in_dim {
                ds.inputs.push(f64::from_le_bytes(read_array(&mut r)?));
            }
            for _ in 0..dim {
                ds.labels.push(f64::from_le_bytes(read_array(&mut r)?));
            }
            ds.provenance
                .push(Provenance::from_code(f64::from_le_bytes(read_array(&mut r)?))?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after last row".into()));
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>, format: FileFormat) -> Result<()> {
        let f = std::fs::File::create(path)?;
        match format {
            FileFormat::Text => self.write_text(f),
            FileFormat::Binary => self.write_binary(f),
        }
    }

    /// Loads either format, detected from the first bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(BINARY_MAGIC) {
            Dataset::read_binary(&bytes[..])
        } else {
            Dataset::read_text(&bytes[..])
        }
    }
}

fn check_header(dim: usize, dt: f64) -> Result<()> {
    if dim == 0 {
        return Err(Error::Format("dataset dimension is zero".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Format(format!("invalid dt {dt}")));
    }
    Ok(())
}

fn parse_text_header(line: &str) -> Result<Dataset> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(TEXT_MAGIC) {
        return Err(Error::Format("missing dataset header".into()));
    }
    let version = parts.next().unwrap_or("");
    if version != format!("v{FORMAT_VERSION}") {
        return Err(Error::Format(format!("unsupported dataset version '{version}'")));
    }
    let (mut dim, mut dt, mut autonomous) = (None, None, None);
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field '{kv}'")))?;
        let bad = |_| Error::Format(format!("bad header value '{kv}'"));
        match k {
            "dim" => dim = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "dt" => dt = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "autonomous" => {
                autonomous = Some(match v {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad(String::new())),
                })
            }
            _ => return Err(Error::Format(format!("unknown header field '{k}'"))),
        }
    }
    let missing = |f: &str| Error::Format(format!("header lacks {f}"));
    let dim = dim.ok_or_else(|| missing("dim"))?;
    let dt = dt.ok_or_else(|| missing("dt"))?;
    check_header(dim, dt)?;
    Ok(Dataset::new(dim, dt, autonomous.ok_or_else(|| missing("autonomous"))?))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated dataset file".into()),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
