//! On-disk store of preprocessed segment pairs.
//!
//! A store directory holds `index.json` (one entry per segment, in storage
//! order) and `segments.bin`, which for every entry holds the PPG samples
//! followed by the respiration samples as little-endian `f64`. Writing the
//! same segments twice yields identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{preprocess, DspError, PreprocessConfig, Scale, SegmentPair};
use crate::signal_io::{subjects, IoError, Recording, SubjectKeyed};

pub const STORE_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";
pub const DATA_FILE: &str = "segments.bin";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad index: {message}")]
    Index { path: PathBuf, message: String },
    #[error("store version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("{path}: data file has {found} bytes, index expects {expected}")]
    Size {
        path: PathBuf,
        found: usize,
        expected: usize,
    },
    #[error("subject '{subject}': {source}")]
    Preprocess {
        subject: String,
        #[source]
        source: DspError,
    },
    #[error(transparent)]
    Input(#[from] IoError),
    #[error("store holds no segments")]
    Empty,
}

impl SubjectKeyed for SegmentPair {
    fn subject_id(&self) -> &str {
        &self.subject_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    subject_id: String,
    segment_index: usize,
    ppg_scale: Scale,
    resp_scale: Scale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    format_version: u32,
    segment_len: usize,
    preprocess: PreprocessConfig,
    segments: Vec<IndexEntry>,
}

/// All segments of a dataset, grouped by subject in ingestion order.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStore {
    pub preprocess: PreprocessConfig,
    pub segments: Vec<SegmentPair>,
}

impl SegmentStore {
    /// Runs the preprocessing chain over every recording.
    pub fn ingest(recordings: &[Recording], config: &PreprocessConfig) -> Result<Self, StoreError> {
        let mut segments = Vec::new();
        for rec in recordings {
            let pairs = preprocess(&rec.subject_id, &rec.ppg, &rec.resp, rec.fs, config).map_err(|source| {
                StoreError::Preprocess {
                    subject: rec.subject_id.clone(),
                    source,
                }
            })?;
            // Segment indices continue across several files of one subject.
            let start = segments
                .iter()
                .filter(|p: &&SegmentPair| p.subject_id == rec.subject_id)
                .count();
            segments.extend(pairs.into_iter().map(|mut p| {
                p.segment_index += start;
                p
            }));
        }
        if segments.is_empty() {
            return Err(StoreError::Empty);
        }
        Ok(Self {
            preprocess: *config,
            segments,
        })
    }

    pub fn segment_len(&self) -> usize {
        self.segments.first().map_or(0, |s| s.ppg.len())
    }

    pub fn subjects(&self) -> Vec<String> {
        subjects(&self.segments)
    }

    /// Segments of one subject ordered by segment index.
    pub fn subject_segments(&self, subject: &str) -> Result<Vec<SegmentPair>, StoreError> {
        let mut out: Vec<SegmentPair> = self
            .segments
            .iter()
            .filter(|s| s.subject_id == subject)
            .cloned()
            .collect();
        if out.is_empty() {
            return Err(IoError::UnknownSubject(subject.to_string()).into());
        }
        out.sort_by_key(|s| s.segment_index);
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<(), StoreError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StoreError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let index = Index {
            format_version: STORE_VERSION,
            segment_len: self.segment_len(),
            preprocess: self.preprocess,
            segments: self
                .segments
                .iter()
                .map(|s| IndexEntry {
                    subject_id: s.subject_id.clone(),
                    segment_index: s.segment_index,
                    ppg_scale: s.ppg_scale,
                    resp_scale: s.resp_scale,
                })
                .collect(),
        };
        let mut data = Vec::with_capacity(self.segments.len() * index.segment_len * 16);
        for s in &self.segments {
            for v in s.ppg.iter().chain(&s.resp) {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let index_path = dir.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(&index).expect("store index serializes");
        fs::write(&index_path, text + "\n").map_err(io(&index_path))?;
        let data_path = dir.join(DATA_FILE);
        fs::write(&data_path, data).map_err(io(&data_path))
    }

    pub fn load(dir: &Path) -> Result<Self, StoreError> {
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path).map_err(|source| StoreError::Io {
            path: index_path.clone(),
            source,
        })?;
        let index: Index = serde_json::from_str(&text).map_err(|e| StoreError::Index {
            path: index_path.clone(),
            message: e.to_string(),
        })?;
        if index.format_version != STORE_VERSION {
            return Err(StoreError::Version {
                found: index.format_version,
                expected: STORE_VERSION,
            });
        }
        let data_path = dir.join(DATA_FILE);
        let data = fs::read(&data_path).map_err(|source| StoreError::Io {
            path: data_path.clone(),
            source,
        })?;
        let n = index.segment_len;
        let expected = index.segments.len() * 2 * n * 8;
        if data.len() != expected {
            return Err(StoreError::Size {
                path: data_path,
                found: data.len(),
                expected,
            });
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let segments: Vec<SegmentPair> = index
            .segments
            .into_iter()
            .zip(values.chunks_exact(2 * n.max(1)))
            .map(|(e, v)| SegmentPair {
                subject_id: e.subject_id,
                segment_index: e.segment_index,
                ppg: v[..n].to_vec(),
                resp: v[n..2 * n].to_vec(),
                ppg_scale: e.ppg_scale,
                resp_scale: e.resp_scale,
            })
            .collect();
        if segments.is_empty() {
            return Err(StoreError::Empty);
        }
        Ok(Self {
            preprocess: index.preprocess,
            segments,
        })
    }
}
