use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ChunkedNote;

pub const INDEX_HEADER: &str = "trace-chunk-index/v1";

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported index header {0:?}, expected {INDEX_HEADER:?}")]
    Header(String),
    #[error("index line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Occurrence counts of one normalized key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyStats {
    per_patient: BTreeMap<String, u32>,
    total: u64,
}

impl KeyStats {
    pub fn patient_count(&self) -> usize {
        self.per_patient.len()
    }

    pub fn count_for(&self, patient_id: &str) -> u32 {
        self.per_patient.get(patient_id).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn patients(&self) -> impl Iterator<Item = (&str, u32)> {
        self.per_patient.iter().map(|(p, &c)| (p.as_str(), c))
    }

    fn add(&mut self, patient_id: &str, count: u32) {
        match self.per_patient.get_mut(patient_id) {
            Some(c) => *c += count,
            None => {
                self.per_patient.insert(patient_id.to_owned(), count);
            }
        }
        self.total += u64::from(count);
    }
}

/// Corpus-wide chunk counts. Merging is associative and commutative, so
/// partial indices over disjoint note shards combine to the same result.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChunkIndex {
    keys: HashMap<String, KeyStats>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    key: String,
    patient_id: String,
    count: u32,
}

impl ChunkIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&KeyStats> {
        self.keys.get(key)
    }

    pub fn add_note(&mut self, note: &ChunkedNote) {
        for occ in &note.occurrences {
            self.add(&occ.key, &note.patient_id, 1);
        }
    }

    fn add(&mut self, key: &str, patient_id: &str, count: u32) {
        match self.keys.get_mut(key) {
            Some(stats) => stats.add(patient_id, count),
            None => {
                let mut stats = KeyStats::default();
                stats.add(patient_id, count);
                self.keys.insert(key.to_owned(), stats);
            }
        }
    }

    pub fn merge(mut self, other: ChunkIndex) -> ChunkIndex {
        let (mut big, small) = if self.keys.len() >= other.keys.len() {
            (std::mem::take(&mut self), other)
        } else {
            (other, self)
        };
        for (key, stats) in small.keys {
            match big.keys.get_mut(&key) {
                Some(existing) => {
                    for (patient, count) in stats.per_patient {
                        existing.add(&patient, count);
                    }
                }
                None => {
                    big.keys.insert(key, stats);
                }
            }
        }
        big
    }

    /// `(key, patient_id, count)` in sorted order.
    pub fn records(&self) -> Vec<(&str, &str, u32)> {
        let mut out: Vec<_> = self
            .keys
            .iter()
            .flat_map(|(k, s)| s.patients().map(move |(p, c)| (k.as_str(), p, c)))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), IndexError> {
        let io_err = |source| IndexError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        writeln!(out, "{INDEX_HEADER}").map_err(io_err)?;
        for (key, patient_id, count) in self.records() {
            let record = Record {
                key: key.to_owned(),
                patient_id: patient_id.to_owned(),
                count,
            };
            let line = serde_json::to_string(&record).expect("records serialize");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    pub fn read(path: &Path) -> Result<ChunkIndex, IndexError> {
        let io_err = |source| IndexError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut lines = BufReader::new(File::open(path).map_err(io_err)?).lines();
        let header = lines.next().transpose().map_err(io_err)?.unwrap_or_default();
        if header.trim() != INDEX_HEADER {
            return Err(IndexError::Header(header));
        }
        let mut index = ChunkIndex::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record =
                serde_json::from_str(&line).map_err(|source| IndexError::Record { line: i + 2, source })?;
            index.add(&record.key, &record.patient_id, record.count);
        }
        Ok(index)
    }
}

pub fn build_index(notes: &[ChunkedNote]) -> ChunkIndex {
    let mut index = ChunkIndex::new();
    for note in notes {
        index.add_note(note);
    }
    index
}

/// Builds partial indices over `shards` contiguous slices in parallel and
/// merges them. The result does not depend on the shard count.
pub fn build_index_sharded(notes: &[ChunkedNote], shards: usize) -> ChunkIndex {
    let shard_len = notes.len().div_ceil(shards.max(1)).max(1);
    notes
        .par_chunks(shard_len)
        .map(build_index)
        .reduce(ChunkIndex::new, ChunkIndex::merge)
}
