//! Synthetic longitudinal corpora with recorded ground truth.
//!
//! Notes are paragraphs joined by `\n`. Each note opens with an authored
//! paragraph; every template or copy insertion is followed by a fresh
//! authored paragraph, so no two insertions touch. Text is built from random
//! pseudo-words, which keeps accidental long matches between unrelated
//! paragraphs out of the picture.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Note, TemplateSource};
use crate::evaluate::{GoldAnnotation, GoldLabel, GoldSpan};

const NOTE_TYPES: &[&str] = &[
    "Progress Notes",
    "Progress Notes",
    "Progress Notes",
    "H&P",
    "Consults",
    "Discharge Summary",
    "ED Provider Notes",
    "Telephone Encounter",
];

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br", "st", "tr", "pl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub templates: usize,
    pub patients: usize,
    pub notes_per_patient: usize,
    /// Insertion opportunities per note.
    pub slots_per_note: usize,
    pub template_rate: f64,
    pub copy_rate: f64,
    /// Chance that an inserted paragraph has one word replaced.
    pub edit_rate: f64,
    /// Chance that an insertion is recorded in the note's metadata.
    pub attribution_rate: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            templates: 20,
            patients: 100,
            notes_per_patient: 10,
            slots_per_note: 3,
            template_rate: 0.3,
            copy_rate: 0.3,
            edit_rate: 0.1,
            attribution_rate: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Authored,
    Templated,
    Copied,
}

/// One paragraph of a generated note.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub kind: SegmentKind,
    /// Template id, or the id of the authored paragraph a copy descends from.
    pub group: String,
    /// Template id or the note the copy was taken from.
    pub source_id: Option<String>,
    pub edited: bool,
    /// Replaced range, in note coordinates.
    pub edit: Option<(usize, usize)>,
    pub attributed: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn is_insertion(&self) -> bool {
        self.kind != SegmentKind::Authored
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteTruth {
    pub note_id: String,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub notes: Vec<Note>,
    pub truth: Vec<NoteTruth>,
    pub gold: Vec<GoldAnnotation>,
}

struct Words {
    rng: ChaCha8Rng,
}

impl Words {
    fn word(&mut self) -> String {
        let syllables = self.rng.gen_range(1..=4);
        (0..syllables)
            .map(|_| {
                let o = ONSETS.choose(&mut self.rng).expect("non-empty");
                let v = VOWELS.choose(&mut self.rng).expect("non-empty");
                format!("{o}{v}")
            })
            .collect()
    }

    fn sentence(&mut self) -> String {
        let n = self.rng.gen_range(6..=14);
        let mut words: Vec<String> = (0..n).map(|_| self.word()).collect();
        let first = &mut words[0];
        *first = first[..1].to_uppercase() + &first[1..];
        words.join(" ") + "."
    }

    fn paragraph(&mut self, sentences: std::ops::RangeInclusive<usize>) -> String {
        let n = self.rng.gen_range(sentences);
        (0..n).map(|_| self.sentence()).collect::<Vec<_>>().join(" ")
    }
}

/// A paragraph available for copying forward.
#[derive(Clone)]
struct Copyable {
    note_id: String,
    group: String,
    text: String,
}

pub fn generate(params: &SynthParams) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(params.seed ^ 0x5eed_0f_7e47),
    };
    let templates: Vec<TemplateSource> = (0..params.templates)
        .map(|i| {
            let heading = words.word().to_uppercase();
            TemplateSource {
                template_id: format!("T{:03}", i + 1),
                text: format!("{heading}: {}", words.paragraph(3..=6)),
            }
        })
        .collect();

    let base: DateTime<Utc> = Utc.with_ymd_and_hms(2021, 1, 4, 8, 0, 0).unwrap();
    let mut notes = Vec::new();
    let mut truth = Vec::new();
    for p in 0..params.patients {
        let patient_id = format!("P{:04}", p + 1);
        let start = base + Duration::hours(rng.gen_range(0..24 * 30));
        let mut pool: Vec<Copyable> = Vec::new();
        for n in 0..params.notes_per_patient {
            let note_id = format!("{patient_id}-N{:03}", n + 1);
            let filed_at = start + Duration::days(n as i64 * 3) + Duration::minutes(rng.gen_range(0..600));
            let mut paragraphs: Vec<(String, Segment)> = Vec::new();
            let mut template_sources: Vec<TemplateSource> = Vec::new();
            let mut copy_sources: BTreeSet<String> = BTreeSet::new();
            let mut used_groups: BTreeSet<String> = BTreeSet::new();
            let mut fresh_pool: Vec<Copyable> = Vec::new();

            push_authored(&mut words, &mut paragraphs, &mut fresh_pool, &note_id);

            for _ in 0..params.slots_per_note {
                let roll: f64 = rng.gen();
                let insertion = if roll < params.template_rate && !templates.is_empty() {
                    let t = &templates[rng.gen_range(0..templates.len())];
                    (!used_groups.contains(&t.template_id)).then(|| {
                        let attributed = rng.gen_bool(params.attribution_rate);
                        if attributed {
                            template_sources.push(t.clone());
                        }
                        (
                            t.text.clone(),
                            SegmentKind::Templated,
                            t.template_id.clone(),
                            t.template_id.clone(),
                            attributed,
                        )
                    })
                } else if roll < params.template_rate + params.copy_rate {
                    let choices: Vec<&Copyable> = pool.iter().filter(|c| !used_groups.contains(&c.group)).collect();
                    choices.choose(&mut rng).map(|c| {
                        let attributed = rng.gen_bool(params.attribution_rate);
                        if attributed {
                            copy_sources.insert(c.note_id.clone());
                        }
                        (
                            c.text.clone(),
                            SegmentKind::Copied,
                            c.group.clone(),
                            c.note_id.clone(),
                            attributed,
                        )
                    })
                } else {
                    None
                };
                let Some((mut text, kind, group, source, attributed)) = insertion else {
                    push_authored(&mut words, &mut paragraphs, &mut fresh_pool, &note_id);
                    continue;
                };
                used_groups.insert(group.clone());
                let mut edit = None;
                if rng.gen_bool(params.edit_rate) {
                    let (new_text, range) = edit_one_word(&text, &mut words);
                    text = new_text;
                    edit = Some(range);
                }
                if kind == SegmentKind::Copied && edit.is_none() {
                    fresh_pool.push(Copyable {
                        note_id: note_id.clone(),
                        group: group.clone(),
                        text: text.clone(),
                    });
                }
                paragraphs.push((
                    text,
                    Segment {
                        start: 0,
                        end: 0,
                        kind,
                        group,
                        source_id: Some(source),
                        edited: edit.is_some(),
                        edit,
                        attributed,
                    },
                ));
                push_authored(&mut words, &mut paragraphs, &mut fresh_pool, &note_id);
            }
            pool.extend(fresh_pool);

            let mut text = String::new();
            let mut segments = Vec::with_capacity(paragraphs.len());
            let mut offset = 0;
            for (i, (para, mut seg)) in paragraphs.into_iter().enumerate() {
                if i > 0 {
                    text.push('\n');
                    offset += 1;
                }
                let len = para.chars().count();
                seg.start = offset;
                seg.end = offset + len;
                seg.edit = seg.edit.map(|(s, e)| (s + offset, e + offset));
                text.push_str(&para);
                offset += len;
                segments.push(seg);
            }
            let note_type = NOTE_TYPES[rng.gen_range(0..NOTE_TYPES.len())].to_owned();
            notes.push(Note {
                note_id: note_id.clone(),
                patient_id: patient_id.clone(),
                filed_at,
                note_type,
                text,
                template_sources,
                copy_source_ids: copy_sources.into_iter().collect(),
            });
            truth.push(NoteTruth { note_id, segments });
        }
    }
    let gold = truth.iter().map(gold_for).collect();
    SynthCorpus { notes, truth, gold }
}

fn push_authored(words: &mut Words, paragraphs: &mut Vec<(String, Segment)>, pool: &mut Vec<Copyable>, note_id: &str) {
    let text = words.paragraph(2..=4);
    let group = format!("{note_id}#{}", paragraphs.len());
    pool.push(Copyable {
        note_id: note_id.to_owned(),
        group: group.clone(),
        text: text.clone(),
    });
    paragraphs.push((
        text,
        Segment {
            start: 0,
            end: 0,
            kind: SegmentKind::Authored,
            group,
            source_id: None,
            edited: false,
            edit: None,
            attributed: false,
        },
    ));
}

/// Replaces one interior word, returning the new text and the replaced range
/// in paragraph coordinates.
fn edit_one_word(text: &str, words: &mut Words) -> (String, (usize, usize)) {
    let chars: Vec<char> = text.chars().collect();
    let spaces: Vec<usize> = (0..chars.len()).filter(|&i| chars[i] == ' ').collect();
    if spaces.len() < 2 {
        let replacement = words.word();
        let len = replacement.chars().count();
        return (replacement, (0, len));
    }
    let k = words.rng.gen_range(0..spaces.len() - 1);
    let (s, e) = (spaces[k] + 1, spaces[k + 1]);
    let old: String = chars[s..e].iter().collect();
    let mut replacement = words.word();
    while replacement == old {
        replacement = words.word();
    }
    let len = replacement.chars().count();
    let mut out: String = chars[..s].iter().collect();
    out.push_str(&replacement);
    out.extend(&chars[e..]);
    (out, (s, s + len))
}

fn gold_for(truth: &NoteTruth) -> GoldAnnotation {
    GoldAnnotation {
        note_id: truth.note_id.clone(),
        spans: truth
            .segments
            .iter()
            .map(|s| GoldSpan {
                start: s.start,
                end: s.end,
                label: if s.kind == SegmentKind::Templated {
                    GoldLabel::Templated
                } else {
                    GoldLabel::Author
                },
            })
            .collect(),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_truth(path: &Path, truth: &[NoteTruth]) -> std::io::Result<()> {
    write_jsonl(path, truth)
}

pub fn write_gold(path: &Path, gold: &[GoldAnnotation]) -> std::io::Result<()> {
    write_jsonl(path, gold)
}
