//! Recording ingestion, synthetic PPG/respiration generation and
//! leave-one-subject-out partitioning.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },
    #[error("{path}: column '{column}' not found in header")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: row {row}, column '{column}': cannot parse '{cell}' as a number")]
    NonNumeric {
        path: PathBuf,
        row: usize,
        column: String,
        cell: String,
    },
    #[error("{path}: row {row}, column '{column}': non-finite value {value}")]
    NonFinite {
        path: PathBuf,
        row: usize,
        column: String,
        value: f64,
    },
    #[error("{path}: column lengths differ ({ppg} PPG vs {resp} respiration samples, first gap at row {row})")]
    LengthMismatch {
        path: PathBuf,
        ppg: usize,
        resp: usize,
        row: usize,
    },
    #[error("{path}: row {row}: {message}")]
    Malformed {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("{path}: invalid sampling rate {fs}")]
    InvalidRate { path: PathBuf, fs: f64 },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid synthetic config: {0}")]
    Synthetic(String),
    #[error("unknown subject '{0}'")]
    UnknownSubject(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A subject's paired PPG and respiration signals at a common rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub ppg: Vec<f64>,
    pub resp: Vec<f64>,
    pub fs: f64,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.ppg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ppg.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.ppg.len() as f64 / self.fs
    }
}

/// Anything that belongs to exactly one subject.
pub trait SubjectKeyed {
    fn subject_id(&self) -> &str;
}

impl SubjectKeyed for Recording {
    fn subject_id(&self) -> &str {
        &self.subject_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub path: PathBuf,
    pub ppg_column: String,
    pub resp_column: String,
    pub fs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    #[serde(rename = "entry", default)]
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parses a TOML manifest. Relative entry paths are resolved against
    /// `base_dir`. Entries may repeat a subject id; use
    /// [`DatasetManifest::subject_ids`] for the grouped view.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, IoError> {
        let mut manifest: DatasetManifest =
            toml::from_str(text).map_err(|e| IoError::Manifest(e.to_string()))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(IoError::Manifest(format!(
                "unsupported format_version {} (expected {MANIFEST_VERSION})",
                manifest.format_version
            )));
        }
        let mut seen = HashSet::new();
        for entry in &mut manifest.entries {
            if !seen.insert((entry.subject_id.clone(), entry.path.clone())) {
                return Err(IoError::Manifest(format!(
                    "duplicate entry for subject '{}' and file {}",
                    entry.subject_id,
                    entry.path.display()
                )));
            }
            if entry.path.is_relative() {
                entry.path = base_dir.join(&entry.path);
            }
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let manifest = Self::parse(&text, base)?;
        for entry in &manifest.entries {
            if !entry.path.exists() {
                return Err(IoError::MissingFile {
                    path: entry.path.clone(),
                });
            }
        }
        Ok(manifest)
    }

    pub fn subject_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for e in &self.entries {
            if !ids.contains(&e.subject_id) {
                ids.push(e.subject_id.clone());
            }
        }
        ids
    }
}

fn sniff_delimiter(header: &str) -> u8 {
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

/// Reads the PPG and respiration columns named by `entry`; every other
/// column is ignored. Rows are numbered from 1 at the first data row.
pub fn load_recording(entry: &ManifestEntry) -> Result<Recording, IoError> {
    let path = &entry.path;
    if !(entry.fs > 0.0) || !entry.fs.is_finite() {
        return Err(IoError::InvalidRate {
            path: path.clone(),
            fs: entry.fs,
        });
    }
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(IoError::MissingFile { path: path.clone() })
        }
        Err(source) => {
            return Err(IoError::Io {
                path: path.clone(),
                source,
            })
        }
    };
    let header_line = text.lines().next().unwrap_or("");
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(header_line))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| IoError::Malformed {
            path: path.clone(),
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let column_index = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::MissingColumn {
                path: path.clone(),
                column: name.to_string(),
            })
    };
    let ppg_col = column_index(&entry.ppg_column)?;
    let resp_col = column_index(&entry.resp_column)?;

    let mut ppg: Vec<Option<f64>> = Vec::new();
    let mut resp: Vec<Option<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| IoError::Malformed {
            path: path.clone(),
            row,
            message: e.to_string(),
        })?;
        for (col, column, out) in [
            (ppg_col, &entry.ppg_column, &mut ppg),
            (resp_col, &entry.resp_column, &mut resp),
        ] {
            let cell = record.get(col).unwrap_or("");
            if cell.is_empty() {
                out.push(None);
                continue;
            }
            let value: f64 = cell.parse().map_err(|_| IoError::NonNumeric {
                path: path.clone(),
                row,
                column: column.clone(),
                cell: cell.to_string(),
            })?;
            if !value.is_finite() {
                return Err(IoError::NonFinite {
                    path: path.clone(),
                    row,
                    column: column.clone(),
                    value,
                });
            }
            out.push(Some(value));
        }
    }

    // Trailing empty cells shorten a column; interior ones are malformed.
    let finish = |cells: Vec<Option<f64>>, column: &str| -> Result<Vec<f64>, IoError> {
        let len = cells.iter().rposition(Option::is_some).map_or(0, |p| p + 1);
        cells[..len]
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| IoError::NonNumeric {
                    path: path.clone(),
                    row: i + 1,
                    column: column.to_string(),
                    cell: String::new(),
                })
            })
            .collect()
    };
    let ppg = finish(ppg, &entry.ppg_column)?;
    let resp = finish(resp, &entry.resp_column)?;
    if ppg.len() != resp.len() {
        return Err(IoError::LengthMismatch {
            path: path.clone(),
            ppg: ppg.len(),
            resp: resp.len(),
            row: ppg.len().min(resp.len()) + 1,
        });
    }
    Ok(Recording {
        subject_id: entry.subject_id.clone(),
        ppg,
        resp,
        fs: entry.fs,
    })
}

/// Parameters of the synthetic PPG generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub rr_bpm: f64,
    pub hr_bpm: f64,
    pub am_depth: f64,
    pub fm_depth: f64,
    pub baseline_depth: f64,
    pub noise_std: f64,
    pub duration_s: f64,
    pub fs: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            rr_bpm: 15.0,
            hr_bpm: 72.0,
            am_depth: 0.3,
            fm_depth: 0.3,
            baseline_depth: 0.3,
            noise_std: 0.05,
            duration_s: 60.0,
            fs: 30.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), IoError> {
        let bad = |msg: String| Err(IoError::Synthetic(msg));
        if !(6.0..=60.0).contains(&self.rr_bpm) {
            return bad(format!("rr_bpm {} outside [6, 60]", self.rr_bpm));
        }
        if !(30.0..=180.0).contains(&self.hr_bpm) {
            return bad(format!("hr_bpm {} outside [30, 180]", self.hr_bpm));
        }
        for (name, v) in [
            ("am_depth", self.am_depth),
            ("fm_depth", self.fm_depth),
            ("baseline_depth", self.baseline_depth),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std {} must be >= 0", self.noise_std));
        }
        if !(self.fs > 0.0) || !(self.duration_s > 0.0) {
            return bad("fs and duration_s must be positive".into());
        }
        Ok(())
    }
}

/// One subject of a synthetic dataset; unset fields come from the
/// dataset's `base` config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSubject {
    pub subject_id: String,
    pub seed: u64,
    pub rr_bpm: f64,
    pub hr_bpm: Option<f64>,
    pub duration_s: Option<f64>,
}

/// TOML description of a synthetic cohort:
///
/// ```toml
/// format_version = 1
/// [base]
/// duration_s = 480.0
/// [[subject]]
/// subject_id = "syn01"
/// seed = 1
/// rr_bpm = 12.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDataset {
    pub format_version: u32,
    #[serde(default)]
    pub base: SyntheticConfig,
    #[serde(rename = "subject")]
    pub subjects: Vec<SyntheticSubject>,
}

impl SyntheticDataset {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let set: Self = toml::from_str(text).map_err(|e| IoError::Synthetic(e.to_string()))?;
        if set.format_version != MANIFEST_VERSION {
            return Err(IoError::Synthetic(format!(
                "format_version {} unsupported (expected {MANIFEST_VERSION})",
                set.format_version
            )));
        }
        if set.subjects.is_empty() {
            return Err(IoError::Synthetic("no subjects".into()));
        }
        let mut seen = HashSet::new();
        for s in &set.subjects {
            if !seen.insert(s.subject_id.as_str()) {
                return Err(IoError::Synthetic(format!("duplicate subject '{}'", s.subject_id)));
            }
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn config_for(&self, subject: &SyntheticSubject) -> SyntheticConfig {
        SyntheticConfig {
            rr_bpm: subject.rr_bpm,
            hr_bpm: subject.hr_bpm.unwrap_or(self.base.hr_bpm),
            duration_s: subject.duration_s.unwrap_or(self.base.duration_s),
            ..self.base.clone()
        }
    }

    pub fn recordings(&self) -> Result<Vec<Recording>, IoError> {
        self.subjects
            .iter()
            .map(|s| {
                let mut rec = generate_synthetic(&self.config_for(s), s.seed)?;
                rec.subject_id = s.subject_id.clone();
                Ok(rec)
            })
            .collect()
    }
}

/// Fraction of each cardiac cycle occupied by the raised-cosine pulse.
const PULSE_DUTY: f64 = 0.4;

/// Raised-cosine pulse over the first `PULSE_DUTY` of each cycle, zero
/// elsewhere. `phase` is in radians.
pub fn pulse_shape(phase: f64) -> f64 {
    let u = (phase / (2.0 * PI)).rem_euclid(1.0);
    if u < PULSE_DUTY {
        0.5 * (1.0 - (2.0 * PI * u / PULSE_DUTY).cos())
    } else {
        0.0
    }
}

/// Synthetic recording with amplitude, frequency and baseline modulation of
/// a pulse train by a sinusoidal respiration.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Recording, IoError> {
    config.validate()?;
    let n = (config.fs * config.duration_s).round() as usize;
    let resp_hz = config.rr_bpm / 60.0;
    let heart_rad_s = 2.0 * PI * config.hr_bpm / 60.0;
    let resp_rad_s = 2.0 * PI * resp_hz;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| IoError::Synthetic(e.to_string()))?;

    let mut ppg = Vec::with_capacity(n);
    let mut resp = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / config.fs;
        let r = (resp_rad_s * t).sin();
        // phase = integral of heart_rad_s * (1 + fm * sin(resp_rad_s t))
        let phase = heart_rad_s * t
            + heart_rad_s * config.fm_depth * (1.0 - (resp_rad_s * t).cos()) / resp_rad_s;
        let clean = (1.0 + config.am_depth * r) * pulse_shape(phase) + config.baseline_depth * r;
        let eps = if config.noise_std > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        ppg.push(clean + eps);
        resp.push(r);
    }
    Ok(Recording {
        subject_id: format!("synthetic-{seed}"),
        ppg,
        resp,
        fs: config.fs,
    })
}

/// Leave-one-subject-out split: everything belonging to `held_out` goes to
/// the test side, input order preserved on both sides.
pub fn split_loso<T: SubjectKeyed + Clone>(
    items: &[T],
    held_out: &str,
) -> Result<(Vec<T>, Vec<T>), IoError> {
    if !items.iter().any(|r| r.subject_id() == held_out) {
        return Err(IoError::UnknownSubject(held_out.to_string()));
    }
    let (test, train): (Vec<T>, Vec<T>) = items
        .iter()
        .cloned()
        .partition(|r| r.subject_id() == held_out);
    Ok((train, test))
}

/// Distinct subject ids in first-appearance order.
pub fn subjects<T: SubjectKeyed>(items: &[T]) -> Vec<String> {
    let mut seen = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        seen.entry(item.subject_id().to_string()).or_insert(i);
    }
    let mut ids: Vec<(usize, String)> = seen.into_iter().map(|(k, v)| (v, k)).collect();
    ids.sort();
    ids.into_iter().map(|(_, k)| k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn entry(path: PathBuf, fs: f64) -> ManifestEntry {
        ManifestEntry {
            subject_id: "s1".into(),
            path,
            ppg_column: "PLETH".into(),
            resp_column: "RESP".into(),
            fs,
        }
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn toy_csv_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "toy.csv", "Time [s], RESP, PLETH, II\n0,0.0,0.1,9\n0.5,1.0,0.2,9\n");
        let rec = load_recording(&entry(p, 2.0)).unwrap();
        assert_eq!(rec.ppg, vec![0.1, 0.2]);
        assert_eq!(rec.resp, vec![0.0, 1.0]);
        assert_eq!(rec.fs, 2.0);
    }

    #[test]
    fn tab_delimited() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "toy.tsv", "RESP\tPLETH\n1\t2\n3\t4\n");
        let rec = load_recording(&entry(p, 1.0)).unwrap();
        assert_eq!(rec.ppg, vec![2.0, 4.0]);
    }

    #[test]
    fn eight_minute_file_length() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("RESP,PLETH\n");
        for i in 0..60_000 {
            body.push_str(&format!("{},{}\n", i % 7, i % 5));
        }
        let p = write(dir.path(), "long.csv", &body);
        let rec = load_recording(&entry(p, 125.0)).unwrap();
        assert_eq!(rec.len(), 60_000);
        assert_eq!(rec.duration_s(), 480.0);
    }

    #[test]
    fn nan_row_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("RESP,PLETH\n");
        for i in 1..=10 {
            let resp = if i == 7 { "NaN".to_string() } else { i.to_string() };
            body.push_str(&format!("{resp},1\n"));
        }
        let p = write(dir.path(), "nan.csv", &body);
        let err = load_recording(&entry(p, 1.0)).unwrap_err();
        match &err {
            IoError::NonFinite { row, column, .. } => {
                assert_eq!(*row, 7);
                assert_eq!(column, "RESP");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("nan.csv"));
        assert!(err.to_string().contains("row 7"));
    }

    #[test]
    fn ingestion_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = load_recording(&entry(dir.path().join("nope.csv"), 1.0)).unwrap_err();
        assert!(matches!(missing, IoError::MissingFile { .. }));

        let p = write(dir.path(), "cols.csv", "RESP,ECG\n1,2\n");
        assert!(matches!(
            load_recording(&entry(p, 1.0)).unwrap_err(),
            IoError::MissingColumn { .. }
        ));

        let p = write(dir.path(), "text.csv", "RESP,PLETH\n1,2\n1,abc\n");
        match load_recording(&entry(p, 1.0)).unwrap_err() {
            IoError::NonNumeric { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }

        let p = write(dir.path(), "short.csv", "RESP,PLETH\n1,2\n1,2\n1,\n");
        assert!(matches!(
            load_recording(&entry(p, 1.0)).unwrap_err(),
            IoError::LengthMismatch { ppg: 2, resp: 3, .. }
        ));
    }

    #[test]
    fn manifest_rejects_unknown_keys_and_versions() {
        let base = Path::new("/data");
        let ok = "format_version = 1\n[[entry]]\nsubject_id = \"a\"\npath = \"a.csv\"\nppg_column = \"PLETH\"\nresp_column = \"RESP\"\nfs = 125.0\n";
        let m = DatasetManifest::parse(ok, base).unwrap();
        assert_eq!(m.entries[0].path, Path::new("/data/a.csv"));
        assert!(DatasetManifest::parse(&ok.replace("fs =", "sample_rate ="), base).is_err());
        assert!(DatasetManifest::parse(&format!("{ok}colour = 1\n"), base).is_err());
        assert!(DatasetManifest::parse(&ok.replace("format_version = 1", "format_version = 2"), base).is_err());
        assert!(DatasetManifest::parse(&ok.replace("format_version = 1\n", ""), base).is_err());
    }

    #[test]
    fn synthetic_unmodulated() {
        let cfg = SyntheticConfig {
            rr_bpm: 15.0,
            am_depth: 0.0,
            fm_depth: 0.0,
            baseline_depth: 0.0,
            noise_std: 0.0,
            ..SyntheticConfig::default()
        };
        let rec = generate_synthetic(&cfg, 3).unwrap();
        let heart_period = (60.0 / cfg.hr_bpm * cfg.fs) as f64;
        for (i, v) in rec.ppg.iter().enumerate() {
            let t = i as f64 / cfg.fs;
            assert_eq!(*v, pulse_shape(2.0 * PI * cfg.hr_bpm / 60.0 * t));
            assert!((rec.resp[i] - (2.0 * PI * 0.25 * t).sin()).abs() < 1e-15);
        }
        assert!(heart_period > 0.0);
    }

    #[test]
    fn synthetic_deterministic() {
        let cfg = SyntheticConfig::default();
        assert_eq!(generate_synthetic(&cfg, 9).unwrap(), generate_synthetic(&cfg, 9).unwrap());
        assert_ne!(generate_synthetic(&cfg, 9).unwrap().ppg, generate_synthetic(&cfg, 10).unwrap().ppg);
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        let mut cfg = SyntheticConfig::default();
        cfg.rr_bpm = 5.0;
        assert!(generate_synthetic(&cfg, 0).is_err());
        cfg.rr_bpm = 12.0;
        cfg.am_depth = 1.5;
        assert!(generate_synthetic(&cfg, 0).is_err());
    }

    #[test]
    fn synthetic_periodic_respiration() {
        let cfg = SyntheticConfig {
            rr_bpm: 12.0,
            noise_std: 0.0,
            duration_s: 60.0,
            ..SyntheticConfig::default()
        };
        let rec = generate_synthetic(&cfg, 1).unwrap();
        // period 5 s = 150 samples at 30 Hz
        for i in 0..rec.len() - 150 {
            assert!((rec.resp[i] - rec.resp[i + 150]).abs() < 1e-9);
        }
    }

    fn rec(id: &str) -> Recording {
        Recording {
            subject_id: id.into(),
            ppg: vec![0.0],
            resp: vec![0.0],
            fs: 1.0,
        }
    }

    #[test]
    fn loso_examples() {
        let all = vec![rec("A"), rec("B"), rec("C")];
        let (train, test) = split_loso(&all, "B").unwrap();
        assert_eq!(subjects(&train), vec!["A", "C"]);
        assert_eq!(subjects(&test), vec!["B"]);

        let (train, test) = split_loso(&[rec("A")], "A").unwrap();
        assert!(train.is_empty());
        assert_eq!(test.len(), 1);

        assert!(matches!(split_loso(&all, "Z"), Err(IoError::UnknownSubject(_))));
    }
}
