//! On-disk session formats: CSV schemas, the session manifest with file
//! digests, and the calibration-bundle JSON.
//!
//! Sessions are directories. Every analysis consumes only files named in
//! the manifest, and digests are verified before parsing. Ground truth from
//! simulated sessions lives under `truth/` and analysis outputs under
//! `outputs/`; neither appears in the manifest.
//!
//! All CSVs use a header row, comma delimiters, and `#`-prefixed comment
//! lines. Count files written by older console scripts carry phase markers
//! (`# Dark Counts`, `# Maxpol light counts`, `# Minpol light counts`)
//! instead of a phase column; the reader maps those onto the phase column
//! on ingest. Floats are serialized with 17 significant digits so
//! re-parsing loses nothing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::instrument::{AttenCalRecord, CalibrationBundle, CpmCalibration, SwitchCalRecord, SwitchCalibration};
use crate::nonlin::{NonlinModel, NonlinRecord, RangeSetting};
use crate::polarization::{PolGrid, PolGridRecord};
use crate::sde::{CountPhase, CountRecord, SdeResult, SdeSessionData};
use crate::stability::StabilitySeries;
use crate::uncertainty::{fmt_17, UncertainValue};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Schema {
        file: String,
        line: u64,
        message: String,
    },
    #[error("json error in {file}: {message}")]
    Json { file: String, message: String },
    #[error("digest mismatch for {path}: manifest says {expected}, file hashes to {actual}")]
    DigestMismatch {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("manifest names no {0} file")]
    MissingRole(String),
    #[error("missing file: {0}")]
    MissingFile(String),
}

impl SessionError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        SessionError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn schema(file: &Path, line: u64, message: impl Into<String>) -> Self {
        SessionError::Schema {
            file: file.display().to_string(),
            line,
            message: message.into(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_digest(path: &Path) -> Result<String, SessionError> {
    let bytes = fs::read(path).map_err(|e| SessionError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Role of a file within a session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Nonlin,
    SwitchCal,
    AttenCal,
    SdeCounts,
    PolScan,
    PolScanDark,
    Stability,
    ZeroOffsets,
    CpmCalibration,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Role::Nonlin => "nonlin",
            Role::SwitchCal => "switch_cal",
            Role::AttenCal => "atten_cal",
            Role::SdeCounts => "sde_counts",
            Role::PolScan => "polscan",
            Role::PolScanDark => "polscan_dark",
            Role::Stability => "stability",
            Role::ZeroOffsets => "zero_offsets",
            Role::CpmCalibration => "cpm_calibration",
        };
        write!(f, "{s}")
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_DIR: &str = "truth";
pub const OUTPUT_DIR: &str = "outputs";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionManifest {
    pub session_id: String,
    pub wavelength_nm: f64,
    /// Attenuator setting used during the counts measurement, dB.
    pub att_nominal_db: f64,
    /// Monitor range during attenuator calibration, dBm.
    pub cal_range_dbm: i32,
    pub files: BTreeMap<Role, FileEntry>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SessionManifest {
    pub fn new(session_id: String, wavelength_nm: f64, att_nominal_db: f64, cal_range_dbm: i32) -> Self {
        SessionManifest {
            session_id,
            wavelength_nm,
            att_nominal_db,
            cal_range_dbm,
            files: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    /// Registers a file already written inside `dir` under a role.
    pub fn register(&mut self, dir: &Path, role: Role, rel_path: &str) -> Result<(), SessionError> {
        let digest = file_digest(&dir.join(rel_path))?;
        self.files.insert(
            role,
            FileEntry {
                path: rel_path.to_string(),
                sha256: digest,
            },
        );
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), SessionError> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| SessionError::Json {
            file: path.display().to_string(),
            message: e.to_string(),
        })?;
        fs::write(&path, json + "\n").map_err(|e| SessionError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, SessionError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(SessionError::MissingFile(path.display().to_string()));
        }
        let bytes = fs::read(&path).map_err(|e| SessionError::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| SessionError::Json {
            file: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Absolute path of a role's file after digest verification.
    pub fn verified_path(&self, dir: &Path, role: Role) -> Result<PathBuf, SessionError> {
        let entry = self
            .files
            .get(&role)
            .ok_or_else(|| SessionError::MissingRole(role.to_string()))?;
        let path = dir.join(&entry.path);
        let actual = file_digest(&path)?;
        if actual != entry.sha256 {
            return Err(SessionError::DigestMismatch {
                path: path.display().to_string(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        Ok(path)
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), SessionError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| SessionError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| SessionError::io(path, e))?;
    f.write_all(content.as_bytes())
        .map_err(|e| SessionError::io(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>, SessionError> {
    let file = fs::File::open(path).map_err(|e| SessionError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_reader(file))
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    name: &str,
    value: &str,
) -> Result<T, SessionError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| {
        SessionError::schema(path, line, format!("bad {name} value {value:?}: {e}"))
    })
}

fn field<'a>(
    path: &Path,
    line: u64,
    headers: &csv::StringRecord,
    record: &'a csv::StringRecord,
    name: &str,
) -> Result<&'a str, SessionError> {
    let idx = headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| SessionError::schema(path, 1, format!("missing column {name:?}")))?;
    record
        .get(idx)
        .ok_or_else(|| SessionError::schema(path, line, format!("row too short for {name:?}")))
}

// --- nonlinearity sweep -------------------------------------------------

pub fn write_nonlin_csv(path: &Path, records: &[NonlinRecord]) -> Result<(), SessionError> {
    let mut out = String::from("att1_db,att2_db,range_dbm,reading_w,wavelength_nm\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_17(r.att1_db),
            fmt_17(r.att2_db),
            r.range.dbm(),
            fmt_17(r.reading_w),
            fmt_17(r.wavelength_nm)
        ));
    }
    write_file(path, &out)
}

pub fn read_nonlin_csv(path: &Path) -> Result<Vec<NonlinRecord>, SessionError> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| SessionError::schema(path, 1, e.to_string()))?.clone();
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| SessionError::schema(path, line, e.to_string()))?;
        let range_dbm: i32 = parse_field(path, line, "range_dbm", field(path, line, &headers, &row, "range_dbm")?)?;
        let range = RangeSetting::try_from_dbm(range_dbm)
            .map_err(|e| SessionError::schema(path, line, e.to_string()))?;
        out.push(NonlinRecord {
            att1_db: parse_field(path, line, "att1_db", field(path, line, &headers, &row, "att1_db")?)?,
            att2_db: parse_field(path, line, "att2_db", field(path, line, &headers, &row, "att2_db")?)?,
            range,
            reading_w: parse_field(path, line, "reading_w", field(path, line, &headers, &row, "reading_w")?)?,
            wavelength_nm: parse_field(path, line, "wavelength_nm", field(path, line, &headers, &row, "wavelength_nm")?)?,
        });
    }
    Ok(out)
}

// --- switch calibration -------------------------------------------------

pub fn write_switch_csv(path: &Path, rec: &SwitchCalRecord) -> Result<(), SessionError> {
    let mut out = String::from("route,reading_w,range_dbm,wavelength_nm\n");
    for r in &rec.cpm_readings_w {
        out.push_str(&format!(
            "detector,{},{},{}\n",
            fmt_17(*r),
            rec.range.dbm(),
            fmt_17(rec.wavelength_nm)
        ));
    }
    for r in &rec.mpm_readings_w {
        out.push_str(&format!(
            "monitor,{},{},{}\n",
            fmt_17(*r),
            rec.range.dbm(),
            fmt_17(rec.wavelength_nm)
        ));
    }
    write_file(path, &out)
}

pub fn read_switch_csv(path: &Path) -> Result<SwitchCalRecord, SessionError> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| SessionError::schema(path, 1, e.to_string()))?.clone();
    let mut cpm = Vec::new();
    let mut mpm = Vec::new();
    let mut wavelength = None;
    let mut range = None;
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| SessionError::schema(path, line, e.to_string()))?;
        let route = field(path, line, &headers, &row, "route")?.trim().to_string();
        let reading: f64 = parse_field(path, line, "reading_w", field(path, line, &headers, &row, "reading_w")?)?;
        let dbm: i32 = parse_field(path, line, "range_dbm", field(path, line, &headers, &row, "range_dbm")?)?;
        let wl: f64 = parse_field(path, line, "wavelength_nm", field(path, line, &headers, &row, "wavelength_nm")?)?;
        wavelength.get_or_insert(wl);
        range.get_or_insert(dbm);
        match route.as_str() {
            "detector" => cpm.push(reading),
            "monitor" => mpm.push(reading),
            other => {
                return Err(SessionError::schema(
                    path,
                    line,
                    format!("route must be detector or monitor, got {other:?}"),
                ))
            }
        }
    }
    let range = RangeSetting::try_from_dbm(range.unwrap_or(-10))
        .map_err(|e| SessionError::schema(path, 1, e.to_string()))?;
    Ok(SwitchCalRecord {
        wavelength_nm: wavelength.unwrap_or(f64::NAN),
        cpm_readings_w: cpm,
        mpm_readings_w: mpm,
        range,
    })
}

// --- attenuator calibration ----------------------------------------------

pub fn write_atten_csv(path: &Path, records: &[AttenCalRecord]) -> Result<(), SessionError> {
    let mut out = String::from("attenuator_id,phase,nominal_db,range_dbm,reading_w,wavelength_nm\n");
    for rec in records {
        for r in &rec.zero_readings_w {
            out.push_str(&format!(
                "{},zero,{},{},{},{}\n",
                rec.attenuator_id,
                fmt_17(rec.nominal_db),
                rec.zero_range.dbm(),
                fmt_17(*r),
                fmt_17(rec.wavelength_nm)
            ));
        }
        for r in &rec.att_readings_w {
            out.push_str(&format!(
                "{},att,{},{},{},{}\n",
                rec.attenuator_id,
                fmt_17(rec.nominal_db),
                rec.att_range.dbm(),
                fmt_17(*r),
                fmt_17(rec.wavelength_nm)
            ));
        }
    }
    write_file(path, &out)
}

pub fn read_atten_csv(path: &Path) -> Result<Vec<AttenCalRecord>, SessionError> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| SessionError::schema(path, 1, e.to_string()))?.clone();
    #[derive(Default)]
    struct Partial {
        zero: Vec<f64>,
        zero_range: Option<i32>,
        att: Vec<f64>,
        att_range: Option<i32>,
        nominal_db: f64,
        wavelength_nm: f64,
    }
    let mut by_id: BTreeMap<u8, Partial> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| SessionError::schema(path, line, e.to_string()))?;
        let id: u8 = parse_field(path, line, "attenuator_id", field(path, line, &headers, &row, "attenuator_id")?)?;
        let phase = field(path, line, &headers, &row, "phase")?.trim().to_string();
        let nominal: f64 = parse_field(path, line, "nominal_db", field(path, line, &headers, &row, "nominal_db")?)?;
        let dbm: i32 = parse_field(path, line, "range_dbm", field(path, line, &headers, &row, "range_dbm")?)?;
        let reading: f64 = parse_field(path, line, "reading_w", field(path, line, &headers, &row, "reading_w")?)?;
        let wl: f64 = parse_field(path, line, "wavelength_nm", field(path, line, &headers, &row, "wavelength_nm")?)?;
        let p = by_id.entry(id).or_default();
        p.nominal_db = nominal;
        p.wavelength_nm = wl;
        match phase.as_str() {
            "zero" => {
                p.zero.push(reading);
                p.zero_range.get_or_insert(dbm);
            }
            "att" => {
                p.att.push(reading);
                p.att_range.get_or_insert(dbm);
            }
            other => {
                return Err(SessionError::schema(
                    path,
                    line,
                    format!("phase must be zero or att, got {other:?}"),
                ))
            }
        }
    }
    let mut out = Vec::new();
    for (id, p) in by_id {
        let zero_range = RangeSetting::try_from_dbm(p.zero_range.unwrap_or(-10))
            .map_err(|e| SessionError::schema(path, 1, e.to_string()))?;
        let att_range = RangeSetting::try_from_dbm(p.att_range.unwrap_or(-30))
            .map_err(|e| SessionError::schema(path, 1, e.to_string()))?;
        out.push(AttenCalRecord {
            attenuator_id: id,
            zero_readings_w: p.zero,
            zero_range,
            att_readings_w: p.att,
            att_range,
            nominal_db: p.nominal_db,
            wavelength_nm: p.wavelength_nm,
        });
    }
    Ok(out)
}

// --- counter records ------------------------------------------------------

pub fn write_counts_csv(path: &Path, records: &[CountRecord]) -> Result<(), SessionError> {
    let mut out = String::from("phase,bias_v,rep,counts\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.phase,
            fmt_17(r.bias_v),
            r.rep,
            r.counts
        ));
    }
    write_file(path, &out)
}

/// Reads counter records. Files with a `phase` column parse directly;
/// legacy console files instead mark sections with comment lines
/// (`# Dark Counts`, `# Maxpol light counts`, `# Minpol light counts`)
/// above `bias_v,counts` rows, and the marker maps to the phase column.
pub fn read_counts_csv(path: &Path) -> Result<Vec<CountRecord>, SessionError> {
    let content = fs::read_to_string(path).map_err(|e| SessionError::io(path, e))?;
    let first_data = content
        .lines()
        .find(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let modern = first_data.is_some_and(|l| l.split(',').any(|f| f.trim() == "phase"));
    if modern {
        return read_counts_modern(path, &content);
    }
    read_counts_legacy(path, &content)
}

fn read_counts_modern(path: &Path, content: &str) -> Result<Vec<CountRecord>, SessionError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(content.as_bytes());
    let headers = rdr.headers().map_err(|e| SessionError::schema(path, 1, e.to_string()))?.clone();
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| SessionError::schema(path, line, e.to_string()))?;
        let phase: CountPhase = field(path, line, &headers, &row, "phase")?
            .parse()
            .map_err(|e| SessionError::schema(path, line, format!("{e}")))?;
        out.push(CountRecord {
            phase,
            bias_v: parse_field(path, line, "bias_v", field(path, line, &headers, &row, "bias_v")?)?,
            rep: parse_field(path, line, "rep", field(path, line, &headers, &row, "rep")?)?,
            counts: parse_field(path, line, "counts", field(path, line, &headers, &row, "counts")?)?,
        });
    }
    Ok(out)
}

fn read_counts_legacy(path: &Path, content: &str) -> Result<Vec<CountRecord>, SessionError> {
    let mut out = Vec::new();
    let mut phase: Option<CountPhase> = None;
    let mut rep_at: BTreeMap<(u8, i64), u32> = BTreeMap::new();
    for (i, raw) in content.lines().enumerate() {
        let line = i as u64 + 1;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        if let Some(marker) = l.strip_prefix('#') {
            let m = marker.trim().to_ascii_lowercase();
            if m.contains("dark") {
                phase = Some(CountPhase::Dark);
            } else if m.contains("maxpol") {
                phase = Some(CountPhase::MaxPol);
            } else if m.contains("minpol") {
                phase = Some(CountPhase::MinPol);
            }
            continue;
        }
        let parts: Vec<&str> = l.split(',').collect();
        if parts.len() != 2 {
            return Err(SessionError::schema(
                path,
                line,
                format!("legacy counts rows are bias_v,counts; got {l:?}"),
            ));
        }
        let Some(ph) = phase else {
            return Err(SessionError::schema(
                path,
                line,
                "counts before any phase marker (e.g. '# Dark Counts')",
            ));
        };
        let bias_v: f64 = parse_field(path, line, "bias_v", parts[0])?;
        let counts: u64 = parse_field(path, line, "counts", parts[1])?;
        let phase_tag = match ph {
            CountPhase::Dark => 0u8,
            CountPhase::MaxPol => 1,
            CountPhase::MinPol => 2,
        };
        let key = (phase_tag, (bias_v * 1e9).round() as i64);
        let rep = rep_at.entry(key).or_insert(0);
        *rep += 1;
        out.push(CountRecord {
            phase: ph,
            bias_v,
            rep: *rep,
            counts,
        });
    }
    Ok(out)
}

// --- polarization sweep ----------------------------------------------------

pub fn write_polscan_csv(path: &Path, records: &[PolGridRecord]) -> Result<(), SessionError> {
    let gates = records.first().map(|r| r.counts.len()).unwrap_or(0);
    let darks = records
        .first()
        .and_then(|r| r.dark_counts.as_ref().map(|d| d.len()))
        .unwrap_or(0);
    let mut header = String::from("qwp_deg,hwp_deg,cpm_w,mpm_w");
    for i in 1..=gates {
        header.push_str(&format!(",counts_{i}"));
    }
    for i in 1..=darks {
        header.push_str(&format!(",dark_{i}"));
    }
    let mut out = header + "\n";
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}",
            fmt_17(r.qwp_deg),
            fmt_17(r.hwp_deg),
            fmt_17(r.cpm_w),
            fmt_17(r.mpm_w)
        ));
        for c in &r.counts {
            out.push_str(&format!(",{c}"));
        }
        if let Some(d) = &r.dark_counts {
            for c in d {
                out.push_str(&format!(",{c}"));
            }
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_polscan_csv(path: &Path) -> Result<Vec<PolGridRecord>, SessionError> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| SessionError::schema(path, 1, e.to_string()))?.clone();
    let count_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.trim().starts_with("counts_"))
        .map(|(i, _)| i)
        .collect();
    let dark_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.trim().starts_with("dark_"))
        .map(|(i, _)| i)
        .collect();
    if count_cols.is_empty() {
        return Err(SessionError::schema(path, 1, "no counts_N columns"));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| SessionError::schema(path, line, e.to_string()))?;
        let mut counts = Vec::with_capacity(count_cols.len());
        for &c in &count_cols {
            counts.push(parse_field(path, line, "counts", row.get(c).unwrap_or(""))?);
        }
        let dark_counts = if dark_cols.is_empty() {
            None
        } else {
            let mut d = Vec::with_capacity(dark_cols.len());
            for &c in &dark_cols {
                d.push(parse_field(path, line, "dark", row.get(c).unwrap_or(""))?);
            }
            Some(d)
        };
        out.push(PolGridRecord {
            qwp_deg: parse_field(path, line, "qwp_deg", field(path, line, &headers, &row, "qwp_deg")?)?,
            hwp_deg: parse_field(path, line, "hwp_deg", field(path, line, &headers, &row, "hwp_deg")?)?,
            counts,
            dark_counts,
            cpm_w: parse_field(path, line, "cpm_w", field(path, line, &headers, &row, "cpm_w")?)?,
            mpm_w: parse_field(path, line, "mpm_w", field(path, line, &headers, &row, "mpm_w")?)?,
        });
    }
    Ok(out)
}

pub fn write_polscan_dark_csv(path: &Path, gates: &[u64]) -> Result<(), SessionError> {
    let mut out = String::from("rep,counts\n");
    for (i, c) in gates.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, c));
    }
    write_file(path, &out)
}

pub fn read_polscan_dark_csv(path: &Path) -> Result<Vec<u64>, SessionError> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| SessionError::schema(path, 1, e.to_string()))?.clone();
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| SessionError::schema(path, line, e.to_string()))?;
        out.push(parse_field(path, line, "counts", field(path, line, &headers, &row, "counts")?)?);
    }
    Ok(out)
}

// --- stability series -------------------------------------------------------

pub fn write_stability_csv(path: &Path, samples: &[(f64, f64)]) -> Result<(), SessionError> {
    let mut out = String::from("timestamp_s,power_w\n");
    for (t, p) in samples {
        out.push_str(&format!("{},{}\n", fmt_17(*t), fmt_17(*p)));
    }
    write_file(path, &out)
}

pub fn read_stability_csv(path: &Path) -> Result<StabilitySeries, SessionError> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| SessionError::schema(path, 1, e.to_string()))?.clone();
    let mut times = Vec::new();
    let mut powers = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| SessionError::schema(path, line, e.to_string()))?;
        times.push(parse_field::<f64>(path, line, "timestamp_s", field(path, line, &headers, &row, "timestamp_s")?)?);
        powers.push(parse_field::<f64>(path, line, "power_w", field(path, line, &headers, &row, "power_w")?)?);
    }
    if times.len() < 2 {
        return Err(SessionError::schema(path, 1, "need at least 2 samples"));
    }
    let span = times.last().unwrap() - times.first().unwrap();
    if !(span > 0.0) {
        return Err(SessionError::schema(path, 1, "timestamps must increase"));
    }
    let fs = (times.len() - 1) as f64 / span;
    StabilitySeries::new(powers, fs).map_err(|e| SessionError::schema(path, 1, e.to_string()))
}

// --- zero offsets -------------------------------------------------------------

pub fn write_zero_offsets_csv(
    path: &Path,
    rows: &[(String, i32, f64)],
) -> Result<(), SessionError> {
    let mut out = String::from("context,range_dbm,offset_w\n");
    for (ctx, dbm, off) in rows {
        out.push_str(&format!("{},{},{}\n", ctx, dbm, fmt_17(*off)));
    }
    write_file(path, &out)
}

// --- calibrated power meter table ----------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CpmEntry {
    pub wavelength_nm: f64,
    pub factor: f64,
    pub relative_sigma: f64,
}

pub fn write_cpm_calibration(path: &Path, entries: &[CpmEntry]) -> Result<(), SessionError> {
    let json = serde_json::to_string_pretty(entries).map_err(|e| SessionError::Json {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_file(path, &(json + "\n"))
}

pub fn read_cpm_calibration(path: &Path) -> Result<CpmCalibration, SessionError> {
    let bytes = fs::read(path).map_err(|e| SessionError::io(path, e))?;
    let entries: Vec<CpmEntry> = serde_json::from_slice(&bytes).map_err(|e| SessionError::Json {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    let triples: Vec<(f64, f64, f64)> = entries
        .iter()
        .map(|e| (e.wavelength_nm, e.factor, e.relative_sigma))
        .collect();
    CpmCalibration::new(&triples).map_err(|e| SessionError::Json {
        file: path.display().to_string(),
        message: e.to_string(),
    })
}

// --- calibration bundle ------------------------------------------------------

/// On-disk calibration bundle: the switch calibration and calibrated-meter
/// table inline, the nonlinearity model by reference (path + digest).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleFile {
    pub wavelength_nm: f64,
    pub nonlin_model: FileEntry,
    pub switch: SwitchCalibrationFile,
    pub cpm: Vec<CpmEntry>,
    /// Standalone attenuator calibrations, when `cal-atten` has run.
    #[serde(default)]
    pub alphas: Vec<AlphaEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwitchCalibrationFile {
    pub wavelength_nm: f64,
    pub ratio: UncertainValue,
    pub mpm_mean: UncertainValue,
    pub range_dbm: i32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlphaEntry {
    pub attenuator_id: u8,
    pub nominal_db: f64,
    pub alpha: UncertainValue,
}

pub fn save_bundle(path: &Path, bundle: &BundleFile) -> Result<(), SessionError> {
    let json = serde_json::to_string_pretty(bundle).map_err(|e| SessionError::Json {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_file(path, &(json + "\n"))
}

pub fn load_bundle_file(path: &Path) -> Result<BundleFile, SessionError> {
    let bytes = fs::read(path).map_err(|e| SessionError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| SessionError::Json {
        file: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Loads a bundle file and resolves its model reference (digest verified)
/// into an in-memory [`CalibrationBundle`].
pub fn load_bundle(path: &Path) -> Result<CalibrationBundle, SessionError> {
    let file = load_bundle_file(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let model_path = base.join(&file.nonlin_model.path);
    let actual = file_digest(&model_path)?;
    if actual != file.nonlin_model.sha256 {
        return Err(SessionError::DigestMismatch {
            path: model_path.display().to_string(),
            expected: file.nonlin_model.sha256.clone(),
            actual,
        });
    }
    let nonlin = load_nonlin_model(&model_path)?;
    let range = RangeSetting::try_from_dbm(file.switch.range_dbm)
        .map_err(|e| SessionError::Json {
            file: path.display().to_string(),
            message: e.to_string(),
        })?;
    let switch = SwitchCalibration {
        wavelength_nm: file.switch.wavelength_nm,
        ratio: file.switch.ratio.clone(),
        mpm_mean: file.switch.mpm_mean.clone(),
        range,
    };
    let triples: Vec<(f64, f64, f64)> = file
        .cpm
        .iter()
        .map(|e| (e.wavelength_nm, e.factor, e.relative_sigma))
        .collect();
    let cpm = CpmCalibration::new(&triples).map_err(|e| SessionError::Json {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(CalibrationBundle {
        nonlin,
        switch,
        cpm,
    })
}

pub fn save_nonlin_model(path: &Path, model: &NonlinModel) -> Result<(), SessionError> {
    let json = serde_json::to_string_pretty(model).map_err(|e| SessionError::Json {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_file(path, &(json + "\n"))
}

pub fn load_nonlin_model(path: &Path) -> Result<NonlinModel, SessionError> {
    let bytes = fs::read(path).map_err(|e| SessionError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| SessionError::Json {
        file: path.display().to_string(),
        message: e.to_string(),
    })
}

// --- assembled session loaders -------------------------------------------------

/// Loads the counts and embedded attenuator calibration of a session
/// directory, verifying manifests and digests.
pub fn load_sde_session(dir: &Path) -> Result<SdeSessionData, SessionError> {
    let manifest = SessionManifest::load(dir)?;
    let counts_path = manifest.verified_path(dir, Role::SdeCounts)?;
    let atten_path = manifest.verified_path(dir, Role::AttenCal)?;
    let records = read_counts_csv(&counts_path)?;
    let atten_cal = read_atten_csv(&atten_path)?;
    let to_schema = |e: crate::sde::SdeError| SessionError::Schema {
        file: counts_path.display().to_string(),
        line: 0,
        message: e.to_string(),
    };
    Ok(SdeSessionData {
        wavelength_nm: manifest.wavelength_nm,
        dark: crate::sde::group_by_bias(&records, CountPhase::Dark).map_err(to_schema)?,
        maxpol: crate::sde::group_by_bias(&records, CountPhase::MaxPol).map_err(to_schema)?,
        minpol: crate::sde::group_by_bias(&records, CountPhase::MinPol).map_err(to_schema)?,
        atten_cal,
    })
}

/// Loads the polarization sweep and its session dark gates.
pub fn load_polscan(dir: &Path) -> Result<(PolGrid, Vec<u64>), SessionError> {
    let manifest = SessionManifest::load(dir)?;
    let grid_path = manifest.verified_path(dir, Role::PolScan)?;
    let records = read_polscan_csv(&grid_path)?;
    let grid = PolGrid::new(records).map_err(|e| SessionError::Schema {
        file: grid_path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let dark = match manifest.verified_path(dir, Role::PolScanDark) {
        Ok(p) => read_polscan_dark_csv(&p)?,
        Err(SessionError::MissingRole(_)) => Vec::new(),
        Err(e) => return Err(e),
    };
    Ok((grid, dark))
}

pub fn write_sde_result(path: &Path, result: &SdeResult) -> Result<(), SessionError> {
    let json = serde_json::to_string_pretty(result).map_err(|e| SessionError::Json {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_file(path, &(json + "\n"))
}

/// Flat per-bias CSV mirror of an [`SdeResult`].
pub fn write_sde_flat_csv(path: &Path, result: &SdeResult) -> Result<(), SessionError> {
    let mut out = String::from("bias_ua,sde,sigma,phase\n");
    for p in &result.points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_17(p.bias_ua),
            fmt_17(p.sde.value()),
            fmt_17(p.sde.sigma()),
            p.phase
        ));
    }
    write_file(path, &out)
}

pub fn write_adev_csv(path: &Path, points: &[crate::stability::AdevPoint]) -> Result<(), SessionError> {
    let mut out = String::from("tau_s,samples_per_bin,adev\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_17(p.tau_s),
            p.samples_per_bin,
            fmt_17(p.adev)
        ));
    }
    write_file(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn nonlin_roundtrip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("nonlin.csv");
        let records = vec![NonlinRecord {
            att1_db: 3.0,
            att2_db: 0.0,
            range: RangeSetting::DbmM10,
            reading_w: 0.5000000000000001e-4,
            wavelength_nm: 1550.0,
        }];
        write_nonlin_csv(&path, &records).unwrap();
        let back = read_nonlin_csv(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn legacy_counts_markers_map_to_phases() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("counts.csv");
        let content = "\
# Dark Counts
0.0,3
0.0,5
# Maxpol light counts
0.0,200
# Minpol light counts
0.0,180
";
        std::fs::write(&path, content).unwrap();
        let records = read_counts_csv(&path).unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(records[0].phase, CountPhase::Dark);
        assert_eq!(records[0].rep, 1);
        assert_eq!(records[1].rep, 2);
        assert_eq!(records[2].phase, CountPhase::MaxPol);
        assert_eq!(records[3].phase, CountPhase::MinPol);
    }

    #[test]
    fn modern_counts_roundtrip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("counts.csv");
        let records = vec![
            CountRecord {
                phase: CountPhase::Dark,
                bias_v: 0.5,
                rep: 1,
                counts: 9917,
            },
            CountRecord {
                phase: CountPhase::MaxPol,
                bias_v: 0.5,
                rep: 1,
                counts: 203441,
            },
        ];
        write_counts_csv(&path, &records).unwrap();
        let back = read_counts_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].counts, 203441);
    }

    #[test]
    fn schema_error_names_file_and_line() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("nonlin.csv");
        std::fs::write(
            &path,
            "att1_db,att2_db,range_dbm,reading_w,wavelength_nm\n3.0,0.0,notanumber,1e-5,1550\n",
        )
        .unwrap();
        let err = read_nonlin_csv(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nonlin.csv"), "{msg}");
        assert!(msg.contains(":2:"), "{msg}");
    }

    #[test]
    fn manifest_digest_verification() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("stability.csv");
        write_stability_csv(&path, &[(0.0, 1e-4), (0.25, 1.01e-4)]).unwrap();
        let mut manifest = SessionManifest::new("s1".into(), 1550.0, 31.0, -30);
        manifest.register(dir.path(), Role::Stability, "stability.csv").unwrap();
        manifest.save(dir.path()).unwrap();
        let loaded = SessionManifest::load(dir.path()).unwrap();
        assert!(loaded.verified_path(dir.path(), Role::Stability).is_ok());
        // Tamper with the file: digest check must fail.
        std::fs::write(&path, "timestamp_s,power_w\n0,2e-4\n1,2e-4\n").unwrap();
        assert!(matches!(
            loaded.verified_path(dir.path(), Role::Stability),
            Err(SessionError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn stability_sample_rate_from_timestamps() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("stability.csv");
        let fs = 4.118;
        let samples: Vec<(f64, f64)> = (0..100).map(|i| (i as f64 / fs, 1e-4)).collect();
        write_stability_csv(&path, &samples).unwrap();
        let series = read_stability_csv(&path).unwrap();
        assert!((series.sample_rate_hz() - fs).abs() < 1e-9);
    }
}
