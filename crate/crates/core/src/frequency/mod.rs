//! Reference-free detection of repeated text through corpus-wide counts of
//! normalized sentence and paragraph chunks.

mod index;

pub use index::{build_index, build_index_sharded, ChunkIndex, IndexError, KeyStats, INDEX_HEADER};

use serde::{Deserialize, Serialize};

use crate::span::{CopyGroup, FlaggedSpan, Label, Module};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkKind {
    Sentence,
    Paragraph,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub kind: ChunkKind,
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyConfig {
    /// A key is templated when seen in strictly more patients than this.
    pub patient_threshold: usize,
    /// A key is copied when seen strictly more often than this in one patient.
    pub per_patient_threshold: usize,
    pub min_nonspace_chars: usize,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        Self {
            patient_threshold: 5,
            per_patient_threshold: 1,
            min_nonspace_chars: 50,
        }
    }
}

/// Lowercases, collapses whitespace runs to one space and trims.
pub fn normalize(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        push_simple_lowercase(&mut out, c);
    }
    out
}

/// Single-character lowercase mapping. Only U+0130 expands under the full
/// mapping; its simple mapping is plain `i`.
fn push_simple_lowercase(out: &mut String, c: char) {
    if c == '\u{130}' {
        out.push('i');
    } else {
        out.extend(c.to_lowercase());
    }
}

fn split_on(chars: &[char], delimiter: char, kind: ChunkKind, out: &mut Vec<Chunk>) {
    let mut start = 0;
    for end in (0..=chars.len()).filter(|&i| i == chars.len() || chars[i] == delimiter) {
        if end > start {
            let raw: String = chars[start..end].iter().collect();
            out.push(Chunk {
                start,
                end,
                kind,
                key: normalize(&raw),
            });
        }
        start = end + 1;
    }
}

/// Sentence chunks split on '.', paragraph chunks on '\n'; delimiters belong
/// to neither neighbour and empty runs are dropped.
pub fn chunk_note(text: &str) -> Vec<Chunk> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    split_on(&chars, '.', ChunkKind::Sentence, &mut out);
    split_on(&chars, '\n', ChunkKind::Paragraph, &mut out);
    out
}

pub fn nonspace_count(key: &str) -> usize {
    key.chars().filter(|c| !c.is_whitespace()).count()
}

pub fn filter_min_nonspace(chunks: Vec<Chunk>, min_nonspace: usize) -> Vec<Chunk> {
    chunks
        .into_iter()
        .filter(|c| nonspace_count(&c.key) >= min_nonspace)
        .collect()
}

/// A counted chunk position, trimmed of surrounding whitespace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Occurrence {
    pub start: usize,
    pub end: usize,
    pub key: String,
}

/// The chunk occurrences of one note that take part in counting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkedNote {
    pub note_id: String,
    pub patient_id: String,
    pub occurrences: Vec<Occurrence>,
}

impl ChunkedNote {
    /// Chunks, filters and trims. A region produced by both chunkings (a
    /// paragraph without a period, say) is one occurrence, not two.
    pub fn new(note_id: &str, patient_id: &str, text: &str, min_nonspace: usize) -> Self {
        let chars: Vec<char> = text.chars().collect();
        let mut occurrences: Vec<Occurrence> = filter_min_nonspace(chunk_note(text), min_nonspace)
            .into_iter()
            .map(|c| {
                let mut start = c.start;
                let mut end = c.end;
                while start < end && chars[start].is_whitespace() {
                    start += 1;
                }
                while end > start && chars[end - 1].is_whitespace() {
                    end -= 1;
                }
                Occurrence { start, end, key: c.key }
            })
            .collect();
        occurrences.sort();
        occurrences.dedup();
        Self {
            note_id: note_id.to_owned(),
            patient_id: patient_id.to_owned(),
            occurrences,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencySpan {
    pub note_id: String,
    pub start: usize,
    pub end: usize,
    pub label: Label,
    pub key: String,
}

impl FrequencySpan {
    pub fn to_flagged(&self, patient_id: &str) -> FlaggedSpan {
        let group = self.label.is_copied().then(|| CopyGroup::Chunk {
            patient_id: patient_id.to_owned(),
            key: self.key.clone(),
        });
        FlaggedSpan {
            start: self.start,
            end: self.end,
            label: self.label,
            module: Module::Frequency,
            source_id: None,
            group,
        }
    }
}

/// Labels one note's occurrences against a frozen index.
pub fn label_chunks(index: &ChunkIndex, note: &ChunkedNote, config: &FrequencyConfig) -> Vec<FrequencySpan> {
    note.occurrences
        .iter()
        .filter_map(|occ| {
            let stats = index.get(&occ.key)?;
            let templated = stats.patient_count() > config.patient_threshold;
            let copied = stats.count_for(&note.patient_id) as usize > config.per_patient_threshold;
            Label::from_flags(templated, copied).map(|label| FrequencySpan {
                note_id: note.note_id.clone(),
                start: occ.start,
                end: occ.end,
                label,
                key: occ.key.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(text: &str, kind: ChunkKind) -> Vec<String> {
        let chars: Vec<char> = text.chars().collect();
        chunk_note(text)
            .into_iter()
            .filter(|c| c.kind == kind)
            .map(|c| chars[c.start..c.end].iter().collect())
            .collect()
    }

    #[test]
    fn sentence_and_paragraph_chunks() {
        assert_eq!(texts("A. B.", ChunkKind::Sentence), ["A", " B"]);
        assert_eq!(texts("A. B.", ChunkKind::Paragraph), ["A. B."]);
        assert!(chunk_note("").is_empty());
        assert_eq!(
            texts("Line one.\nLine two", ChunkKind::Paragraph),
            ["Line one.", "Line two"]
        );
        assert_eq!(
            texts("Line one.\nLine two", ChunkKind::Sentence),
            ["Line one", "\nLine two"]
        );
    }

    #[test]
    fn numbers_split_naively() {
        assert_eq!(texts("Temp 98.6 today", ChunkKind::Sentence), ["Temp 98", "6 today"]);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize("Patient  DENIES   Chest Pain"), "patient denies chest pain");
        assert_eq!(normalize("abc"), "abc");
        assert_eq!(normalize("  A\t\nB "), "a b");
        assert_eq!(normalize("\u{130}STANBUL"), "istanbul");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize(" \t "), "");
    }

    fn chunk_with_key(key: &str) -> Chunk {
        Chunk {
            start: 0,
            end: key.chars().count(),
            kind: ChunkKind::Sentence,
            key: key.into(),
        }
    }

    #[test]
    fn nonspace_threshold() {
        let k49 = "x".repeat(49);
        let k50 = format!("{} {}", "x".repeat(25), "y".repeat(25));
        let kept = filter_min_nonspace(vec![chunk_with_key(&k49), chunk_with_key(&k50)], 50);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].key, k50);
        assert!(filter_min_nonspace(vec![chunk_with_key(&" ".repeat(60))], 50).is_empty());
        assert_eq!(filter_min_nonspace(vec![chunk_with_key("x")], 1).len(), 1);
    }

    #[test]
    fn overlapping_chunkings_count_once() {
        let note = ChunkedNote::new("n", "p", "First line.\nLine two", 1);
        let keys: Vec<&str> = note.occurrences.iter().map(|o| o.key.as_str()).collect();
        assert_eq!(keys, ["first line", "first line.", "line two"]);
        assert_eq!((note.occurrences[2].start, note.occurrences[2].end), (12, 20));
    }

    #[test]
    fn repeated_key_in_one_note() {
        let note = ChunkedNote::new("n", "p", "same words here. same words here.", 1);
        let same = note.occurrences.iter().filter(|o| o.key == "same words here").count();
        assert_eq!(same, 2);
    }
}
