use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use chrono::NaiveDate;

use crate::graph::{read_edges_csv, write_edges_csv, NetworkTopology};

use super::{BasinDataset, DataError, Observation, ReleaseSeries};

pub const EDGES_CSV: &str = "edges.csv";
pub const DRIVERS_CSV: &str = "drivers.csv";
pub const OBSERVATIONS_CSV: &str = "observations.csv";
pub const RESERVOIR_META_CSV: &str = "reservoir_meta.csv";
pub const RELEASE_CSV: &str = "release.csv";
pub const PROFILES_CSV: &str = "profiles.csv";
pub const TRUTH_CSV: &str = "truth.csv";

pub const META_COLUMNS: [&str; 5] = [
    "dam_height_m",
    "dam_length_m",
    "depth_m",
    "elevation_m",
    "catchment_area_km2",
];

const DATE_FORMAT: &str = "%Y-%m-%d";

/// Which optional tables to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Read `release.csv` and `profiles.csv` when present.
    pub release: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { release: true }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn schema(file: &str, message: impl Into<String>) -> DataError {
    DataError::SchemaError {
        file: file.into(),
        message: message.into(),
    }
}

struct Table {
    file: &'static str,
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(dir: &Path, file: &'static str) -> Result<Self, DataError> {
        let path = dir.join(file);
        let f = File::open(&path).map_err(|e| io_err(&path, e))?;
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f);
        let headers = r
            .headers()
            .map_err(|e| schema(file, e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        let rows = r
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| schema(file, e.to_string()))?;
        Ok(Self { file, headers, rows })
    }

    fn column(&self, name: &str) -> Result<usize, DataError> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| schema(self.file, format!("missing column `{name}`")))
    }

    /// Indices of `prefix0, prefix1, ...` columns in numeric order.
    fn numbered(&self, prefix: &str, first: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut k = first;
        while let Some(i) = self.headers.iter().position(|h| *h == format!("{prefix}{k}")) {
            out.push(i);
            k += 1;
        }
        out
    }

    fn parse_f64(&self, row: &csv::StringRecord, col: usize) -> Result<f64, DataError> {
        let s = row.get(col).unwrap_or("");
        s.parse::<f64>()
            .map_err(|_| schema(self.file, format!("`{s}` is not a number")))
    }

    fn parse_usize(&self, row: &csv::StringRecord, col: usize) -> Result<usize, DataError> {
        let s = row.get(col).unwrap_or("");
        s.parse::<usize>()
            .map_err(|_| schema(self.file, format!("`{s}` is not a non-negative integer")))
    }

    fn parse_date(&self, row: &csv::StringRecord, col: usize) -> Result<NaiveDate, DataError> {
        let s = row.get(col).unwrap_or("");
        NaiveDate::parse_from_str(s, DATE_FORMAT).map_err(|_| schema(self.file, format!("`{s}` is not a YYYY-MM-DD date")))
    }
}

/// Per-reservoir `T x L` series from `release.csv` / `profiles.csv`.
fn read_layers(
    dir: &Path,
    file: &'static str,
    prefix: &str,
    start: NaiveDate,
    n_days: usize,
    n_reservoirs: usize,
) -> Result<BTreeMap<usize, (usize, Vec<f64>)>, DataError> {
    let t = Table::read(dir, file)?;
    let rid = t.column("reservoir_id")?;
    let dcol = t.column("date")?;
    let layers = t.numbered(prefix, 1);
    if layers.is_empty() {
        return Err(schema(file, format!("missing `{prefix}1..` columns")));
    }
    let l = layers.len();
    let mut out: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    for row in &t.rows {
        let k = t.parse_usize(row, rid)?;
        if k >= n_reservoirs {
            return Err(schema(file, format!("unknown reservoir {k}")));
        }
        let date = t.parse_date(row, dcol)?;
        let day = (date - start).num_days();
        if day < 0 || day as usize >= n_days {
            return Err(DataError::CalendarGap(format!("{file}: {date} outside the driver calendar")));
        }
        let entry = out.entry(k).or_insert_with(|| (0, vec![f64::NAN; n_days * l]));
        for (j, &c) in layers.iter().enumerate() {
            entry.1[day as usize * l + j] = t.parse_f64(row, c)?;
        }
        entry.0 += 1;
    }
    for (k, (count, values)) in &out {
        if *count != n_days || values.iter().any(|v| v.is_nan()) {
            return Err(DataError::CalendarGap(format!("{file}: reservoir {k} does not cover every day")));
        }
    }
    Ok(out)
}

/// Reads a dataset directory and its topology.
pub fn load_dataset(dir: &Path, options: LoadOptions) -> Result<(NetworkTopology, BasinDataset), DataError> {
    // drivers.csv defines the segments and the calendar.
    let t = Table::read(dir, DRIVERS_CSV)?;
    let scol = t.column("segment_id")?;
    let dcol = t.column("date")?;
    let feats = t.numbered("feat_", 0);
    if feats.is_empty() {
        return Err(schema(DRIVERS_CSV, "missing `feat_0..` columns"));
    }
    let dx = feats.len();
    let mut rows: Vec<(usize, NaiveDate, Vec<f64>)> = Vec::with_capacity(t.rows.len());
    for row in &t.rows {
        let s = t.parse_usize(row, scol)?;
        let d = t.parse_date(row, dcol)?;
        let v = feats.iter().map(|&c| t.parse_f64(row, c)).collect::<Result<Vec<_>, _>>()?;
        rows.push((s, d, v));
    }
    let n_segments = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let start = rows
        .iter()
        .map(|r| r.1)
        .min()
        .ok_or_else(|| schema(DRIVERS_CSV, "no rows"))?;
    let end = rows.iter().map(|r| r.1).max().unwrap_or(start);
    let n_days = (end - start).num_days() as usize + 1;
    let mut drivers = vec![f64::NAN; n_days * n_segments * dx];
    let mut seen = vec![false; n_days * n_segments];
    for (s, d, v) in rows {
        let day = (d - start).num_days() as usize;
        let slot = day * n_segments + s;
        if seen[slot] {
            return Err(schema(DRIVERS_CSV, format!("duplicate row for segment {s} on {d}")));
        }
        seen[slot] = true;
        drivers[slot * dx..(slot + 1) * dx].copy_from_slice(&v);
    }
    if let Some(slot) = seen.iter().position(|&b| !b) {
        let (day, s) = (slot / n_segments, slot % n_segments);
        let date = start + chrono::Days::new(day as u64);
        let day_missing_everywhere = (0..n_segments).all(|i| !seen[day * n_segments + i]);
        return Err(if day_missing_everywhere {
            DataError::CalendarGap(format!("no driver rows on {date}"))
        } else {
            schema(DRIVERS_CSV, format!("segment {s} has no drivers on {date}"))
        });
    }

    let t = Table::read(dir, OBSERVATIONS_CSV)?;
    let scol = t.column("segment_id")?;
    let dcol = t.column("date")?;
    let vcol = t.column("temp_c")?;
    let mut observations = Vec::with_capacity(t.rows.len());
    for row in &t.rows {
        let s = t.parse_usize(row, scol)?;
        let d = t.parse_date(row, dcol)?;
        let day = (d - start).num_days();
        if s >= n_segments || day < 0 || day as usize >= n_days {
            return Err(DataError::OrphanObservation(format!("segment {s} on {d}")));
        }
        observations.push(Observation {
            segment: s,
            day: day as usize,
            temp_c: t.parse_f64(row, vcol)?,
        });
    }

    let t = Table::read(dir, RESERVOIR_META_CSV)?;
    let rcol = t.column("reservoir_id")?;
    let cols = META_COLUMNS
        .iter()
        .map(|c| t.column(c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut meta_rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for row in &t.rows {
        let k = t.parse_usize(row, rcol)?;
        let v = cols.iter().map(|&c| t.parse_f64(row, c)).collect::<Result<Vec<_>, _>>()?;
        if meta_rows.insert(k, v).is_some() {
            return Err(schema(RESERVOIR_META_CSV, format!("duplicate reservoir {k}")));
        }
    }
    let n_reservoirs = meta_rows.len();
    if meta_rows.keys().enumerate().any(|(i, &k)| i != k) {
        return Err(schema(RESERVOIR_META_CSV, "reservoir ids must be 0..M-1"));
    }
    let meta: Vec<Vec<f64>> = meta_rows.into_values().collect();

    let mut release = vec![None; n_reservoirs];
    if options.release {
        let has_release = dir.join(RELEASE_CSV).exists();
        let has_profiles = dir.join(PROFILES_CSV).exists();
        match (has_release, has_profiles) {
            (true, false) => return Err(DataError::PartialReleaseData(format!("{RELEASE_CSV} without {PROFILES_CSV}"))),
            (false, true) => return Err(DataError::PartialReleaseData(format!("{PROFILES_CSV} without {RELEASE_CSV}"))),
            (false, false) => {}
            (true, true) => {
                let flows = read_layers(dir, RELEASE_CSV, "flow_layer_", start, n_days, n_reservoirs)?;
                let temps = read_layers(dir, PROFILES_CSV, "temp_layer_", start, n_days, n_reservoirs)?;
                if flows.keys().ne(temps.keys()) {
                    return Err(DataError::PartialReleaseData(
                        "reservoirs listed in release.csv and profiles.csv differ".into(),
                    ));
                }
                for ((k, (_, f)), (_, (_, m))) in flows.into_iter().zip(temps) {
                    if f.len() != m.len() {
                        return Err(DataError::PartialReleaseData(format!(
                            "reservoir {k}: flow and profile layer counts differ"
                        )));
                    }
                    release[k] = Some(ReleaseSeries {
                        n_layers: f.len() / n_days,
                        flows: f,
                        temps: m,
                    });
                }
            }
        }
    }

    let path = dir.join(EDGES_CSV);
    let edges = read_edges_csv(File::open(&path).map_err(|e| io_err(&path, e))?)?;
    let topology = NetworkTopology::build(n_segments, n_reservoirs, edges)?;
    let dataset = BasinDataset::new(start, n_days, n_segments, dx, drivers, observations, meta, release)?;
    Ok((topology, dataset))
}

fn writer(dir: &Path, file: &str) -> Result<csv::Writer<BufWriter<File>>, DataError> {
    let path = dir.join(file);
    let f = File::create(&path).map_err(|e| io_err(&path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn csv_err(file: &str, e: csv::Error) -> DataError {
    schema(file, e.to_string())
}

// `f64` Display is shortest round-trip, so write/load is lossless.
fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else {
        format!("{v}")
    }
}

/// Writes every table of the dataset (plus `edges.csv`) into `dir`.
pub fn write_dataset(dir: &Path, topology: &NetworkTopology, data: &BasinDataset) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(EDGES_CSV);
    let f = File::create(&path).map_err(|e| io_err(&path, e))?;
    write_edges_csv(topology.edges(), BufWriter::new(f))?;

    let mut w = writer(dir, DRIVERS_CSV)?;
    let mut header = vec!["segment_id".to_string(), "date".to_string()];
    header.extend((0..data.n_features).map(|f| format!("feat_{f}")));
    w.write_record(&header).map_err(|e| csv_err(DRIVERS_CSV, e))?;
    for i in 0..data.n_segments {
        for t in 0..data.n_days {
            let mut rec = vec![i.to_string(), data.date(t).format(DATE_FORMAT).to_string()];
            rec.extend(data.driver(t, i).iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec).map_err(|e| csv_err(DRIVERS_CSV, e))?;
        }
    }
    w.flush().map_err(|e| io_err(dir, e))?;

    let mut w = writer(dir, OBSERVATIONS_CSV)?;
    w.write_record(["segment_id", "date", "temp_c"])
        .map_err(|e| csv_err(OBSERVATIONS_CSV, e))?;
    let mut obs = data.observations().to_vec();
    obs.sort_by_key(|o| (o.segment, o.day));
    for o in obs {
        w.write_record([
            o.segment.to_string(),
            data.date(o.day).format(DATE_FORMAT).to_string(),
            fmt_f64(o.temp_c),
        ])
        .map_err(|e| csv_err(OBSERVATIONS_CSV, e))?;
    }
    w.flush().map_err(|e| io_err(dir, e))?;

    let mut w = writer(dir, RESERVOIR_META_CSV)?;
    let mut header = vec!["reservoir_id"];
    header.extend(META_COLUMNS);
    w.write_record(&header).map_err(|e| csv_err(RESERVOIR_META_CSV, e))?;
    for (k, m) in data.meta().iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(m.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec).map_err(|e| csv_err(RESERVOIR_META_CSV, e))?;
    }
    w.flush().map_err(|e| io_err(dir, e))?;

    let with_release: Vec<usize> = (0..data.n_reservoirs()).filter(|&k| data.has_release(k)).collect();
    if !with_release.is_empty() {
        let l = data.n_layers();
        for (file, prefix, flows) in [(RELEASE_CSV, "flow_layer_", true), (PROFILES_CSV, "temp_layer_", false)] {
            let mut w = writer(dir, file)?;
            let mut header = vec!["reservoir_id".to_string(), "date".to_string()];
            header.extend((1..=l).map(|d| format!("{prefix}{d}")));
            w.write_record(&header).map_err(|e| csv_err(file, e))?;
            for &k in &with_release {
                let series = data.release(k).expect("checked");
                for t in 0..data.n_days {
                    let mut rec = vec![k.to_string(), data.date(t).format(DATE_FORMAT).to_string()];
                    let vals = if flows { series.flows_at(t) } else { series.temps_at(t) };
                    rec.extend(vals.iter().map(|&v| fmt_f64(v)));
                    w.write_record(&rec).map_err(|e| csv_err(file, e))?;
                }
            }
            w.flush().map_err(|e| io_err(dir, e))?;
        }
    }
    data.access().reset();
    Ok(())
}
