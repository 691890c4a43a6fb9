//! Data exchange: event ingestion onto a spatial grid, trajectory CSV,
//! train/test splitting, and versioned JSON model files.

use crate::model::{FeasibleSet, LinkFunction, ModelError, ModelShape, Trajectory};
use chrono::{DateTime, Datelike, FixedOffset, NaiveDate, NaiveDateTime, TimeZone, Utc};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed row {row}: {detail}")]
    Malformed { row: usize, detail: String },
    #[error("grid: {0}")]
    BadGrid(String),
    #[error("format version {got} unsupported (expected {expected})")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Half-open spatial cell: contains points with
/// `lon_min <= lon < lon_max` and `lat_min <= lat < lat_max`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CellRect {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl CellRect {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lon >= self.lon_min && lon < self.lon_max && lat >= self.lat_min && lat < self.lat_max
    }

    fn overlaps(&self, other: &CellRect) -> bool {
        self.lon_min < other.lon_max
            && other.lon_min < self.lon_max
            && self.lat_min < other.lat_max
            && other.lat_min < self.lat_max
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub enum TimeBin {
    /// Events are grouped by the calendar month containing them, counted
    /// from the origin's month.
    CalendarMonth,
    FixedWidth { seconds: u64 },
}

/// Spatio-temporal binning of raw events: disjoint half-open cells indexed
/// by position in `cells`, and a time axis anchored at `origin` (RFC 3339).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells: Vec<CellRect>,
    pub time_bin: TimeBin,
    pub origin: String,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), IoError> {
        if self.cells.is_empty() {
            return Err(IoError::BadGrid("no cells".into()));
        }
        for (i, c) in self.cells.iter().enumerate() {
            if !(c.lon_min < c.lon_max && c.lat_min < c.lat_max)
                || ![c.lon_min, c.lon_max, c.lat_min, c.lat_max]
                    .iter()
                    .all(|v| v.is_finite())
            {
                return Err(IoError::BadGrid(format!("cell {i} is degenerate")));
            }
        }
        for i in 0..self.cells.len() {
            for j in (i + 1)..self.cells.len() {
                if self.cells[i].overlaps(&self.cells[j]) {
                    return Err(IoError::BadGrid(format!("cells {i} and {j} overlap")));
                }
            }
        }
        if let TimeBin::FixedWidth { seconds } = self.time_bin {
            if seconds == 0 {
                return Err(IoError::BadGrid("time bin width must be positive".into()));
            }
        }
        self.origin_time()?;
        Ok(())
    }

    pub fn origin_time(&self) -> Result<DateTime<Utc>, IoError> {
        parse_timestamp(&self.origin)
            .ok_or_else(|| IoError::BadGrid(format!("unparseable origin {:?}", self.origin)))
    }

    /// Lowest cell id containing the point (cells are disjoint, so at most
    /// one matches).
    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<usize> {
        self.cells.iter().position(|c| c.contains(lat, lon))
    }

    /// Time-bin index of a timestamp; negative means before the origin.
    pub fn bin_of(&self, ts: DateTime<Utc>, origin: DateTime<Utc>) -> i64 {
        match self.time_bin {
            TimeBin::CalendarMonth => {
                let months = |d: DateTime<Utc>| d.year() as i64 * 12 + d.month0() as i64;
                months(ts) - months(origin)
            }
            TimeBin::FixedWidth { seconds } => {
                (ts - origin).num_seconds().div_euclid(seconds as i64)
            }
        }
    }

    pub fn locations(&self) -> usize {
        self.cells.len()
    }

    pub fn load(path: &Path) -> Result<GridSpec, IoError> {
        let grid: GridSpec = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        self.validate()?;
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }
}

/// RFC 3339 first, then a plain date (midnight UTC), then a `T`-separated
/// naive datetime (assumed UTC).
fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(dt) = DateTime::<FixedOffset>::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    if let Ok(d) = s.parse::<NaiveDate>() {
        return Some(Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0)?));
    }
    if let Ok(dt) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S") {
        return Some(Utc.from_utc_datetime(&dt));
    }
    None
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    /// Fail on the first malformed row instead of counting and skipping it.
    pub strict: bool,
    /// Number of time bins to keep; defaults to one past the latest event.
    pub horizon: Option<usize>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            strict: false,
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub total_rows: usize,
    pub events_binned: usize,
    pub dropped_out_of_grid: usize,
    pub dropped_out_of_horizon: usize,
    pub malformed: usize,
}

/// Bin an event table (`timestamp,lat,lon` CSV) onto the grid as a count
/// trajectory with `d` zero history states, so every time bin becomes a
/// usable step. Events outside the grid, before the origin, or past the
/// horizon are dropped and counted.
pub fn ingest_events(
    path: &Path,
    grid: &GridSpec,
    d: usize,
    opts: &IngestOptions,
) -> Result<(Trajectory, IngestReport), IoError> {
    grid.validate()?;
    let shape = ModelShape::new(grid.locations(), d.max(1), 1)?;
    if d == 0 {
        return Err(IoError::InvalidArgument("memory d must be positive".into()));
    }
    let origin = grid.origin_time()?;
    let mut report = IngestReport::default();
    let mut binned: Vec<(usize, usize)> = Vec::new(); // (bin, cell)
    let mut max_bin: i64 = -1;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (ts_col, lat_col, lon_col) = match (col("timestamp"), col("lat"), col("lon")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(IoError::Malformed {
                row: 0,
                detail: format!("header must name timestamp, lat, lon (got {headers:?})"),
            })
        }
    };
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2; // 1-based, after the header line
        report.total_rows += 1;
        let mut malformed = |detail: String| -> Result<(), IoError> {
            if opts.strict {
                Err(IoError::Malformed { row, detail })
            } else {
                report.malformed += 1;
                Ok(())
            }
        };
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                malformed(e.to_string())?;
                continue;
            }
        };
        let field = |c: usize| record.get(c).map(str::trim);
        let parsed = (|| {
            let ts = parse_timestamp(field(ts_col)?)?;
            let lat: f64 = field(lat_col)?.parse().ok()?;
            let lon: f64 = field(lon_col)?.parse().ok()?;
            Some((ts, lat, lon))
        })();
        let Some((ts, lat, lon)) = parsed else {
            malformed(format!("unparseable fields {record:?}"))?;
            continue;
        };
        let Some(cell) = grid.cell_of(lat, lon) else {
            report.dropped_out_of_grid += 1;
            continue;
        };
        let bin = grid.bin_of(ts, origin);
        if bin < 0 || opts.horizon.is_some_and(|h| bin >= h as i64) {
            report.dropped_out_of_horizon += 1;
            continue;
        }
        max_bin = max_bin.max(bin);
        binned.push((bin as usize, cell));
    }
    let horizon = opts.horizon.unwrap_or((max_bin + 1) as usize);
    let mut counts = vec![vec![0.0; shape.state_dim()]; horizon];
    for (bin, cell) in binned {
        counts[bin][cell] += 1.0;
        report.events_binned += 1;
    }
    let mut traj = Trajectory::with_zero_history(shape);
    for state in counts {
        traj.push_state(state)?;
    }
    Ok((traj, report))
}

/// Split after `n_train` steps. The test trajectory keeps the last `d`
/// training states as its history, so its step 1 is the original step
/// `n_train + 1`.
pub fn train_test_split(
    traj: &Trajectory,
    n_train: usize,
) -> Result<(Trajectory, Trajectory), IoError> {
    let total = traj.num_steps();
    if n_train == 0 || n_train >= total {
        return Err(IoError::InvalidArgument(format!(
            "need 1 <= n_train < {total}, got {n_train}"
        )));
    }
    let d = traj.shape().memory();
    let states = traj.states();
    let train = Trajectory::new(*traj.shape(), states[..d + n_train].to_vec())?;
    let test = Trajectory::new(*traj.shape(), states[n_train..].to_vec())?;
    Ok((train, test))
}

/// Write a trajectory as CSV with header `t,loc_0,...`; rows start at the
/// earliest history time `t = -d+1`.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<(), IoError> {
    let n = traj.shape().state_dim();
    let d = traj.shape().memory() as i64;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|k| format!("loc_{k}")));
    w.write_record(&header)?;
    for (i, state) in traj.states().iter().enumerate() {
        let t = i as i64 - d + 1;
        let mut rec = vec![t.to_string()];
        rec.extend(state.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path, shape: ModelShape) -> Result<Trajectory, IoError> {
    let n = shape.state_dim();
    let d = shape.memory() as i64;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() != n + 1 || headers.get(0) != Some("t") {
        return Err(IoError::Malformed {
            row: 1,
            detail: format!("expected header t,loc_0,...,loc_{} (got {headers:?})", n - 1),
        });
    }
    let mut states = Vec::new();
    let mut expected_t = -d + 1;
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2;
        let record = record?;
        let t: i64 = record
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| IoError::Malformed {
                row,
                detail: "bad time index".into(),
            })?;
        if t != expected_t {
            return Err(IoError::Malformed {
                row,
                detail: format!("time index {t}, expected {expected_t}"),
            });
        }
        expected_t += 1;
        let mut state = Vec::with_capacity(n);
        for k in 0..n {
            let v: f64 = record
                .get(k + 1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| IoError::Malformed {
                    row,
                    detail: format!("bad value in column loc_{k}"),
                })?;
            state.push(v);
        }
        states.push(state);
    }
    Ok(Trajectory::new(shape, states)?)
}

/// Fitted model on disk: shape, link, feasible set, and the flat parameter
/// vector, under a format version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub shape: ModelShape,
    pub link: LinkFunction,
    pub feasible: FeasibleSet,
    pub beta: Vec<f64>,
}

impl ModelFile {
    pub fn new(
        shape: ModelShape,
        link: LinkFunction,
        feasible: FeasibleSet,
        beta: Vec<f64>,
    ) -> Self {
        ModelFile {
            version: FORMAT_VERSION,
            shape,
            link,
            feasible,
            beta,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<ModelFile, IoError> {
        let file: ModelFile = load_json(path)?;
        if file.version != FORMAT_VERSION {
            return Err(IoError::VersionMismatch {
                got: file.version,
                expected: FORMAT_VERSION,
            });
        }
        if file.beta.len() != file.shape.kappa() {
            return Err(IoError::InvalidArgument(format!(
                "parameter length {} does not match kappa {}",
                file.beta.len(),
                file.shape.kappa()
            )));
        }
        Ok(file)
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
