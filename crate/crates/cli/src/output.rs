use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use mvsteady::spectral::{Point, TorusDomain};

use crate::config::RunConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// `1.2345678901234567e-3`: 17 significant digits, so values round-trip and
/// identical runs give identical bytes.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

/// Pretty JSON with every float written by [`fmt_f64`].
struct FixedDigits<'a>(PrettyFormatter<'a>);

impl Formatter for FixedDigits<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(fmt_f64(value).as_bytes())
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedDigits(PrettyFormatter::new()));
    value.serialize(&mut ser).map_err(io::Error::other)?;
    buf.push(b'\n');
    Ok(buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    fs::write(path, to_json(value)?)
}

/// CSV file whose first lines are `#` comments carrying the schema version
/// and the resolved config as one-line JSON.
pub struct Csv {
    out: BufWriter<File>,
}

impl Csv {
    pub fn create(path: &Path, cfg: &RunConfig, header: &[String]) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "# schema_version {SCHEMA_VERSION}")?;
        writeln!(out, "# config {}", serde_json::to_string(cfg).map_err(io::Error::other)?)?;
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out })
    }

    pub fn row(&mut self, values: impl IntoIterator<Item = f64>) -> io::Result<()> {
        let cells: Vec<String> = values.into_iter().map(fmt_f64).collect();
        writeln!(self.out, "{}", cells.join(","))
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.out.flush()
    }
}

pub fn indexed_header(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

/// `density_####.csv` with one row per grid point: coordinates, then rho.
pub fn write_density(
    dir: &Path,
    index: usize,
    cfg: &RunConfig,
    domain: &TorusDomain,
    grid: &[Point],
    values: &[f64],
) -> io::Result<String> {
    let name = format!("density_{index:04}.csv");
    let header: Vec<String> = match domain.dim() {
        1 => vec!["x".into(), "rho".into()],
        _ => vec!["x".into(), "y".into(), "rho".into()],
    };
    let mut csv = Csv::create(&dir.join(&name), cfg, &header)?;
    for (x, v) in grid.iter().zip(values) {
        match domain.dim() {
            1 => csv.row([x[0], *v])?,
            _ => csv.row([x[0], x[1], *v])?,
        }
    }
    csv.finish()?;
    Ok(name)
}
