//! Turns pooled detections into a per-note removal plan and condensed text.
//!
//! Templated text is always deleted. Copied text is grouped by content
//! identity and only the earliest instance under `(filed_at, note_id, start)`
//! survives.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{serialize_timestamp, Corpus, Note, TemplateSource};
use crate::span::{Action, CopyGroup, FlaggedSpan, Label, Module};

#[derive(Debug, Error)]
pub enum CondenseError {
    #[error("note {note_id}: span [{start}, {end}) outside text of length {len}")]
    OutOfBounds {
        note_id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("note {note_id}: spans overlap or are unsorted at [{start}, {end})")]
    Overlap { note_id: String, start: usize, end: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed annotation record: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// A maximal flagged range of one note after pooling both modules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSpan {
    #[serde(skip)]
    pub note_id: String,
    pub start: usize,
    pub end: usize,
    pub label: Label,
    pub modules: Vec<Module>,
    pub source_ids: Vec<String>,
    pub action: Action,
    /// The detections this span was built from.
    #[serde(skip)]
    pub members: Vec<FlaggedSpan>,
}

impl ResolvedSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    fn from_members(note_id: &str, start: usize, end: usize, members: Vec<FlaggedSpan>) -> Self {
        let label = members
            .iter()
            .map(|m| m.label)
            .reduce(Label::union)
            .expect("resolved spans have members");
        let modules: BTreeSet<Module> = members.iter().map(|m| m.module).collect();
        let source_ids: BTreeSet<&String> = members.iter().filter_map(|m| m.source_id.as_ref()).collect();
        Self {
            note_id: note_id.to_owned(),
            start,
            end,
            label,
            modules: modules.into_iter().collect(),
            source_ids: source_ids.into_iter().cloned().collect(),
            action: if label.is_templated() {
                Action::Remove
            } else {
                Action::KeepFirstInstanceKept
            },
            members,
        }
    }
}

/// Unions overlapping or touching detections.
///
/// A union containing any templated detection is removed outright. Copied-only
/// unions start out kept; [`apply_dedup_policy`] settles them.
pub fn resolve_overlaps(spans: &[FlaggedSpan], note: &Note) -> Result<Vec<ResolvedSpan>, CondenseError> {
    let len = note.char_len();
    if let Some(bad) = spans.iter().find(|s| s.start >= s.end || s.end > len) {
        return Err(CondenseError::OutOfBounds {
            note_id: note.note_id.clone(),
            start: bad.start,
            end: bad.end,
            len,
        });
    }
    let mut sorted = spans.to_vec();
    sorted.sort_by(|a, b| {
        (a.start, a.end, a.label, a.module, &a.source_id, &a.group).cmp(&(
            b.start,
            b.end,
            b.label,
            b.module,
            &b.source_id,
            &b.group,
        ))
    });
    sorted.dedup();

    let mut out = Vec::new();
    let mut iter = sorted.into_iter().peekable();
    while let Some(first) = iter.next() {
        let (start, mut end) = (first.start, first.end);
        let mut members = vec![first];
        while let Some(next) = iter.next_if(|n| n.start <= end) {
            end = end.max(next.end);
            members.push(next);
        }
        out.push(ResolvedSpan::from_members(&note.note_id, start, end, members));
    }
    Ok(out)
}

/// Removal plans keyed by note id.
pub type PlanMap = BTreeMap<String, Vec<ResolvedSpan>>;

/// Outcome of de-duplicating one copied group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupOutcome {
    pub group: CopyGroup,
    pub members: Vec<GroupMember>,
}

impl GroupOutcome {
    pub fn kept(&self) -> impl Iterator<Item = &GroupMember> {
        self.members.iter().filter(|m| m.kept)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMember {
    pub note_id: String,
    pub filed_at: DateTime<Utc>,
    pub start: usize,
    pub end: usize,
    pub kept: bool,
    /// The original text in the source note, which carries no span of its own.
    pub origin: bool,
    /// Removed regardless of order because templated text overlaps it.
    pub blocked: bool,
}

impl GroupMember {
    fn order(&self) -> (DateTime<Utc>, &str, usize, usize) {
        (self.filed_at, &self.note_id, self.start, self.end)
    }
}

/// Settles the action of every copied span.
///
/// Members of each copy group are ordered by `(filed_at, note_id, start)`.
/// The earliest member not overlapped by templated text is kept; the rest are
/// removed. Groups of text aligned against a source note also contain the
/// source's own range, which is usually the earliest instance. A character is
/// removed when any member covering it is removed, so a copied span may be
/// split into kept and removed parts.
pub fn apply_dedup_policy(corpus: &Corpus, plans: &mut PlanMap) -> Vec<GroupOutcome> {
    // (note_id, span index, member index) per group.
    type MemberRef = Option<(String, usize, usize)>;
    let mut groups: BTreeMap<CopyGroup, Vec<(GroupMember, MemberRef)>> = BTreeMap::new();
    for (note_id, spans) in plans.iter() {
        let Some(note) = corpus.note(note_id) else {
            continue;
        };
        for (si, span) in spans.iter().enumerate() {
            for (mi, m) in span.members.iter().enumerate() {
                let Some(group) = &m.group else { continue };
                let member = GroupMember {
                    note_id: note_id.clone(),
                    filed_at: note.filed_at,
                    start: m.start,
                    end: m.end,
                    kept: false,
                    origin: false,
                    blocked: span.label.is_templated(),
                };
                groups
                    .entry(group.clone())
                    .or_default()
                    .push((member, Some((note_id.clone(), si, mi))));
            }
        }
    }
    for (group, members) in groups.iter_mut() {
        if let CopyGroup::Source { note_id, start, end } = group {
            if let Some(source) = corpus.note(note_id) {
                members.push((
                    GroupMember {
                        note_id: note_id.clone(),
                        filed_at: source.filed_at,
                        start: *start,
                        end: *end,
                        kept: false,
                        origin: true,
                        blocked: false,
                    },
                    None,
                ));
            }
        }
    }

    let mut removed: HashMap<(String, usize, usize), bool> = HashMap::new();
    let mut outcomes = Vec::with_capacity(groups.len());
    for (group, mut members) in groups {
        members.sort_by(|(a, _), (b, _)| a.order().cmp(&b.order()).then(b.origin.cmp(&a.origin)));
        let keeper = members
            .iter()
            .find(|(m, _)| !m.blocked)
            .map(|(m, _)| (m.note_id.clone(), m.start, m.end));
        for (member, slot) in members.iter_mut() {
            member.kept = !member.blocked
                && keeper
                    .as_ref()
                    .is_some_and(|k| (&k.0, k.1, k.2) == (&member.note_id, member.start, member.end));
            if let Some(slot) = slot.take() {
                *removed.entry(slot).or_insert(false) |= !member.kept;
            }
        }
        outcomes.push(GroupOutcome {
            group,
            members: members.into_iter().map(|(m, _)| m).collect(),
        });
    }

    for (note_id, spans) in plans.iter_mut() {
        let old = std::mem::take(spans);
        for (si, span) in old.into_iter().enumerate() {
            if span.label.is_templated() {
                spans.push(span);
                continue;
            }
            let removals: Vec<(usize, usize)> = span
                .members
                .iter()
                .enumerate()
                .filter(|(mi, _)| removed.get(&(note_id.clone(), si, *mi)).copied().unwrap_or(false))
                .map(|(_, m)| (m.start, m.end))
                .collect();
            spans.extend(split_by_removal(span, &removals));
        }
    }
    outcomes
}

/// Cuts a copied-only span into maximal runs that are uniformly kept or
/// removed.
fn split_by_removal(span: ResolvedSpan, removals: &[(usize, usize)]) -> Vec<ResolvedSpan> {
    let mut removed = vec![false; span.len()];
    for &(s, e) in removals {
        for flag in &mut removed[s - span.start..e - span.start] {
            *flag = true;
        }
    }
    let mut out = Vec::new();
    let mut seg_start = 0;
    while seg_start < removed.len() {
        let state = removed[seg_start];
        let seg_end = removed[seg_start..]
            .iter()
            .position(|&r| r != state)
            .map_or(removed.len(), |p| seg_start + p);
        let (start, end) = (span.start + seg_start, span.start + seg_end);
        let members: Vec<FlaggedSpan> = span
            .members
            .iter()
            .filter(|m| m.start < end && m.end > start)
            .cloned()
            .collect();
        let mut piece = ResolvedSpan::from_members(&span.note_id, start, end, members);
        piece.action = if state {
            Action::KeepFirstInstanceRemoved
        } else {
            Action::KeepFirstInstanceKept
        };
        out.push(piece);
        seg_start = seg_end;
    }
    out
}

/// Maps character positions between an original text and its condensed form.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OffsetMap {
    /// Retained runs as `(original start, original end, condensed start)`.
    kept: Vec<(usize, usize, usize)>,
    original_len: usize,
    condensed_len: usize,
}

impl OffsetMap {
    pub fn identity(len: usize) -> Self {
        Self {
            kept: if len > 0 { vec![(0, len, 0)] } else { vec![] },
            original_len: len,
            condensed_len: len,
        }
    }

    /// Condensed position of an original character; a removed character maps
    /// to the position where its removal happened.
    pub fn to_condensed(&self, original: usize) -> usize {
        let idx = self.kept.partition_point(|&(s, _, _)| s <= original);
        if idx == 0 {
            return 0;
        }
        let (s, e, c) = self.kept[idx - 1];
        if original < e {
            c + (original - s)
        } else {
            c + (e - s)
        }
    }

    /// Original position of a condensed character. Positions inside an elision
    /// marker map to the start of the elided range.
    pub fn to_original(&self, condensed: usize) -> usize {
        if condensed >= self.condensed_len {
            return self.original_len;
        }
        let idx = self.kept.partition_point(|&(_, _, c)| c <= condensed);
        if idx == 0 {
            return 0;
        }
        let (s, e, c) = self.kept[idx - 1];
        (s + (condensed - c)).min(e)
    }

    /// Smallest original range covering condensed `[start, end)`.
    pub fn range_to_original(&self, start: usize, end: usize) -> (usize, usize) {
        if end <= start {
            let at = self.to_original(start);
            return (at, at);
        }
        (self.to_original(start), self.to_original(end - 1) + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedNote {
    pub note: Note,
    pub spans: Vec<ResolvedSpan>,
    pub condensed_text: String,
    pub removed_chars: usize,
    pub offsets: OffsetMap,
}

/// Deletes every removal range. With a marker, each maximal removed run is
/// replaced by the marker instead of vanishing.
pub fn condense_note(
    note: &Note,
    spans: Vec<ResolvedSpan>,
    marker: Option<&str>,
) -> Result<AnnotatedNote, CondenseError> {
    let chars: Vec<char> = note.text.chars().collect();
    let mut prev_end = 0;
    for s in &spans {
        if s.end > chars.len() || s.start >= s.end {
            return Err(CondenseError::OutOfBounds {
                note_id: note.note_id.clone(),
                start: s.start,
                end: s.end,
                len: chars.len(),
            });
        }
        if s.start < prev_end {
            return Err(CondenseError::Overlap {
                note_id: note.note_id.clone(),
                start: s.start,
                end: s.end,
            });
        }
        prev_end = s.end;
    }

    let mut removals: Vec<(usize, usize)> = Vec::new();
    for s in spans.iter().filter(|s| s.action.removes()) {
        match removals.last_mut() {
            Some(last) if last.1 == s.start => last.1 = s.end,
            _ => removals.push((s.start, s.end)),
        }
    }
    let marker_len = marker.map_or(0, |m| m.chars().count());

    let mut text = String::with_capacity(note.text.len());
    let mut kept = Vec::new();
    let mut cursor = 0;
    let mut condensed_len = 0;
    let mut removed_chars = 0;
    for &(s, e) in removals.iter().chain(std::iter::once(&(chars.len(), chars.len()))) {
        if s > cursor {
            kept.push((cursor, s, condensed_len));
            text.extend(&chars[cursor..s]);
            condensed_len += s - cursor;
        }
        if e > s {
            removed_chars += e - s;
            if let Some(m) = marker {
                text.push_str(m);
                condensed_len += marker_len;
            }
        }
        cursor = e;
    }

    Ok(AnnotatedNote {
        note: note.clone(),
        spans,
        condensed_text: text,
        removed_chars,
        offsets: OffsetMap {
            kept,
            original_len: chars.len(),
            condensed_len,
        },
    })
}

/// A condensed note as written to disk: the input schema plus `removed_chars`.
#[derive(Serialize)]
struct CondensedRecord<'a> {
    note_id: &'a str,
    patient_id: &'a str,
    #[serde(serialize_with = "serialize_timestamp")]
    filed_at: &'a DateTime<Utc>,
    note_type: &'a str,
    text: &'a str,
    template_sources: &'a [TemplateSource],
    copy_source_ids: &'a [String],
    removed_chars: usize,
}

/// One line of the annotation sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub note_id: String,
    pub spans: Vec<ResolvedSpan>,
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> CondenseError + '_ {
    move |source| CondenseError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_condensed(path: &Path, notes: &[AnnotatedNote]) -> Result<(), CondenseError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_error(path))?);
    for a in notes {
        let record = CondensedRecord {
            note_id: &a.note.note_id,
            patient_id: &a.note.patient_id,
            filed_at: &a.note.filed_at,
            note_type: &a.note.note_type,
            text: &a.condensed_text,
            template_sources: &a.note.template_sources,
            copy_source_ids: &a.note.copy_source_ids,
            removed_chars: a.removed_chars,
        };
        let line = serde_json::to_string(&record).expect("records serialize");
        writeln!(out, "{line}").map_err(io_error(path))?;
    }
    out.flush().map_err(io_error(path))
}

pub fn write_sidecar(path: &Path, notes: &[AnnotatedNote]) -> Result<(), CondenseError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_error(path))?);
    for a in notes {
        let record = SidecarRecord {
            note_id: a.note.note_id.clone(),
            spans: a.spans.clone(),
        };
        let line = serde_json::to_string(&record).expect("records serialize");
        writeln!(out, "{line}").map_err(io_error(path))?;
    }
    out.flush().map_err(io_error(path))
}

pub fn read_sidecar(path: &Path) -> Result<Vec<SidecarRecord>, CondenseError> {
    let reader = BufReader::new(File::open(path).map_err(io_error(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: SidecarRecord =
            serde_json::from_str(&line).map_err(|source| CondenseError::Json { line: i + 1, source })?;
        for span in &mut record.spans {
            span.note_id = record.note_id.clone();
        }
        out.push(record);
    }
    Ok(out)
}
