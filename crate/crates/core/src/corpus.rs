//! Note data model, JSONL ingestion and timeline ordering.
//!
//! Every character offset used anywhere in this crate is a Unicode scalar
//! index into [`Note::text`], never a byte offset.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: unparsable timestamp {value:?}")]
    Timestamp { line: usize, value: String },
    #[error("duplicate note_id {0:?}")]
    DuplicateNoteId(String),
    #[error("note {note_id:?}: template {template_id:?} has empty text")]
    EmptyTemplate { note_id: String, template_id: String },
    #[error("timeline for patient {expected:?} received note {note_id:?} of patient {found:?}")]
    MixedPatients {
        expected: String,
        found: String,
        note_id: String,
    },
}

/// A template body attached to a note through attribution metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSource {
    pub template_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Note {
    pub note_id: String,
    pub patient_id: String,
    #[serde(serialize_with = "serialize_timestamp")]
    pub filed_at: DateTime<Utc>,
    pub note_type: String,
    pub text: String,
    pub template_sources: Vec<TemplateSource>,
    pub copy_source_ids: Vec<String>,
}

impl Note {
    /// Length of the text in Unicode scalar values.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Sort key defining "earlier" across the whole corpus.
    pub fn order_key(&self) -> (DateTime<Utc>, &str) {
        (self.filed_at, self.note_id.as_str())
    }
}

pub(crate) fn serialize_timestamp<S: Serializer>(ts: &DateTime<Utc>, serializer: S) -> Result<S::Ok, S::Error> {
    serializer.serialize_str(&format_timestamp(ts))
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Parses an ISO-8601 timestamp into UTC.
///
/// Offsets are honoured. A timestamp without an offset (or a bare date) is
/// taken as UTC; the returned flag is `true` in that case so callers can warn.
pub fn parse_timestamp(value: &str) -> Option<(DateTime<Utc>, bool)> {
    let value = value.trim();
    if let Ok(ts) = DateTime::parse_from_rfc3339(value) {
        return Some((ts.with_timezone(&Utc), false));
    }
    if let Ok(ts) = DateTime::parse_from_str(value, "%Y-%m-%dT%H:%M:%S%.f%z") {
        return Some((ts.with_timezone(&Utc), false));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(value, fmt) {
            return Some((naive.and_utc(), true));
        }
    }
    NaiveDate::parse_from_str(value, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|naive| (naive.and_utc(), true))
}

/// On-disk shape; every field optional so missing ones get a precise error.
#[derive(Deserialize)]
struct RawNote {
    note_id: Option<String>,
    patient_id: Option<String>,
    filed_at: Option<String>,
    note_type: Option<String>,
    text: Option<String>,
    #[serde(default)]
    template_sources: Vec<TemplateSource>,
    #[serde(default)]
    copy_source_ids: Vec<String>,
}

impl RawNote {
    fn into_note(self, line: usize) -> Result<Note, CorpusError> {
        let missing = |field| CorpusError::MissingField { line, field };
        let note_id = self.note_id.ok_or_else(|| missing("note_id"))?;
        let raw_ts = self.filed_at.ok_or_else(|| missing("filed_at"))?;
        let (filed_at, assumed_utc) = parse_timestamp(&raw_ts).ok_or_else(|| CorpusError::Timestamp {
            line,
            value: raw_ts.clone(),
        })?;
        if assumed_utc {
            log::warn!("line {line}: timestamp {raw_ts:?} has no offset, assuming UTC");
        }
        let note = Note {
            patient_id: self.patient_id.ok_or_else(|| missing("patient_id"))?,
            note_type: self.note_type.ok_or_else(|| missing("note_type"))?,
            text: self.text.ok_or_else(|| missing("text"))?,
            note_id,
            filed_at,
            template_sources: self.template_sources,
            copy_source_ids: self.copy_source_ids,
        };
        if let Some(t) = note.template_sources.iter().find(|t| t.text.is_empty()) {
            return Err(CorpusError::EmptyTemplate {
                note_id: note.note_id.clone(),
                template_id: t.template_id.clone(),
            });
        }
        Ok(note)
    }
}

/// One patient's notes in `(filed_at, note_id)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub patient_id: String,
    pub notes: Vec<Note>,
}

/// Sorts notes of a single patient into a timeline.
pub fn order_timeline(mut notes: Vec<Note>) -> Result<Timeline, CorpusError> {
    let patient_id = match notes.first() {
        Some(n) => n.patient_id.clone(),
        None => String::new(),
    };
    if let Some(stray) = notes.iter().find(|n| n.patient_id != patient_id) {
        return Err(CorpusError::MixedPatients {
            expected: patient_id,
            found: stray.patient_id.clone(),
            note_id: stray.note_id.clone(),
        });
    }
    notes.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    Ok(Timeline { patient_id, notes })
}

/// All timelines of a corpus, ordered by patient id, with a note-id index.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    timelines: Vec<Timeline>,
    index: HashMap<String, (usize, usize)>,
}

impl Corpus {
    pub fn from_notes(notes: Vec<Note>) -> Result<Self, CorpusError> {
        let mut by_patient: BTreeMap<String, Vec<Note>> = BTreeMap::new();
        let mut seen = std::collections::HashSet::with_capacity(notes.len());
        for note in notes {
            if !seen.insert(note.note_id.clone()) {
                return Err(CorpusError::DuplicateNoteId(note.note_id));
            }
            by_patient.entry(note.patient_id.clone()).or_default().push(note);
        }
        let timelines = by_patient
            .into_values()
            .map(order_timeline)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_timelines(timelines))
    }

    fn from_timelines(timelines: Vec<Timeline>) -> Self {
        let mut index = HashMap::new();
        for (t, timeline) in timelines.iter().enumerate() {
            for (n, note) in timeline.notes.iter().enumerate() {
                index.insert(note.note_id.clone(), (t, n));
            }
        }
        Self { timelines, index }
    }

    pub fn timelines(&self) -> &[Timeline] {
        &self.timelines
    }

    pub fn note(&self, note_id: &str) -> Option<&Note> {
        self.index.get(note_id).map(|&(t, n)| &self.timelines[t].notes[n])
    }

    /// Notes in corpus order: patients ascending, each timeline in order.
    pub fn notes(&self) -> impl Iterator<Item = &Note> {
        self.timelines.iter().flat_map(|t| t.notes.iter())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Reads a JSONL corpus. Blank lines are skipped.
pub fn read_notes(path: &Path) -> Result<Vec<Note>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut notes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        notes.push(parse_note_line(&line, idx + 1)?);
    }
    Ok(notes)
}

pub fn parse_note_line(line: &str, line_no: usize) -> Result<Note, CorpusError> {
    let raw: RawNote = serde_json::from_str(line).map_err(|source| CorpusError::Json { line: line_no, source })?;
    raw.into_note(line_no)
}

pub fn ingest_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    Corpus::from_notes(read_notes(path)?)
}

pub fn write_notes<'a>(path: &Path, notes: impl IntoIterator<Item = &'a Note>) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for note in notes {
        let line = serde_json::to_string(note).expect("notes always serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
