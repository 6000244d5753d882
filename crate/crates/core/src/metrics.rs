//! Corpus reduction statistics and token/cost projection.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::condense::ResolvedSpan;
use crate::corpus::Note;
use crate::span::{Label, Module};

/// Characters per token implied by the published corpus totals
/// (742,698,491 characters, 220,166,861 tokens).
pub const DEFAULT_CHARS_PER_TOKEN: f64 = 742_698_491.0 / 220_166_861.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("chars_per_token must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("cost parameter `{0}` must be positive")]
    NonPositive(&'static str),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LabelBreakdown {
    pub templated: usize,
    pub copied: usize,
    pub both: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ModuleBreakdown {
    pub reference_only: usize,
    pub frequency_only: usize,
    pub both: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ModuleNoteCounts {
    pub reference: usize,
    pub frequency: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoteTypeRow {
    pub note_type: String,
    pub notes: usize,
    pub chars: usize,
    pub flagged_fraction: f64,
    pub removed_fraction: f64,
    /// Characters labelled templated (alone or with copied).
    pub templated_fraction: f64,
    /// Characters labelled copied only.
    pub copied_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Distribution {
    fn of(mut values: Vec<f64>) -> Option<Distribution> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let median = if n % 2 == 1 {
            values[n / 2]
        } else {
            (values[n / 2 - 1] + values[n / 2]) / 2.0
        };
        Some(Distribution {
            count: n,
            mean: values.iter().sum::<f64>() / n as f64,
            median,
            min: values[0],
            max: values[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusReport {
    pub notes_total: usize,
    pub patients_total: usize,
    pub notes_flagged: usize,
    pub notes_flagged_by_module: ModuleNoteCounts,
    pub chars_total: usize,
    /// Characters inside any resolved span, kept first instances included.
    pub chars_flagged: usize,
    pub chars_removed: usize,
    pub copied_kept_chars: usize,
    pub reduction_fraction: f64,
    /// Flagged characters by label; sums to `chars_flagged`.
    pub label_breakdown: LabelBreakdown,
    /// Flagged characters by detecting module; sums to `chars_flagged`.
    pub module_breakdown: ModuleBreakdown,
    /// Sorted by note count, most frequent first.
    pub note_types: Vec<NoteTypeRow>,
    pub per_note_reduction: Option<Distribution>,
    pub per_patient_reduction: Option<Distribution>,
    pub mean_chars_removed_per_patient: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct TypeTally {
    notes: usize,
    chars: usize,
    flagged: usize,
    removed: usize,
    templated: usize,
    copied: usize,
}

/// Mergeable partial report. Folding notes in any order or grouping yields
/// the same [`CorpusReport`].
#[derive(Debug, Clone, Default)]
pub struct ReportAccumulator {
    notes_total: usize,
    notes_flagged: usize,
    by_module: ModuleNoteCounts,
    chars_total: usize,
    chars_flagged: usize,
    chars_removed: usize,
    labels: LabelBreakdown,
    modules: ModuleBreakdown,
    types: BTreeMap<String, TypeTally>,
    /// `(note_id, chars, removed)`; note ids keep the fold order-independent.
    notes: Vec<(String, usize, usize)>,
    patients: BTreeMap<String, (usize, usize)>,
}

impl ReportAccumulator {
    pub fn add(&mut self, note: &Note, spans: &[ResolvedSpan]) {
        let chars = note.char_len();
        let flagged: usize = spans.iter().map(ResolvedSpan::len).sum();
        let removed: usize = spans.iter().filter(|s| s.action.removes()).map(ResolvedSpan::len).sum();
        self.notes_total += 1;
        self.chars_total += chars;
        self.chars_flagged += flagged;
        self.chars_removed += removed;
        if !spans.is_empty() {
            self.notes_flagged += 1;
        }
        let found_by = |m| spans.iter().any(|s| s.modules.contains(&m));
        self.by_module.reference += usize::from(found_by(Module::Reference));
        self.by_module.frequency += usize::from(found_by(Module::Frequency));

        let mut templated = 0;
        for s in spans {
            let len = s.len();
            match s.label {
                Label::Templated => self.labels.templated += len,
                Label::Copied => self.labels.copied += len,
                Label::Both => self.labels.both += len,
            }
            if s.label.is_templated() {
                templated += len;
            }
            let r = s.modules.contains(&Module::Reference);
            let f = s.modules.contains(&Module::Frequency);
            match (r, f) {
                (true, true) => self.modules.both += len,
                (true, false) => self.modules.reference_only += len,
                _ => self.modules.frequency_only += len,
            }
        }

        let t = self.types.entry(note.note_type.clone()).or_default();
        t.notes += 1;
        t.chars += chars;
        t.flagged += flagged;
        t.removed += removed;
        t.templated += templated;
        t.copied += flagged - templated;

        self.notes.push((note.note_id.clone(), chars, removed));
        let p = self.patients.entry(note.patient_id.clone()).or_default();
        p.0 += chars;
        p.1 += removed;
    }

    pub fn merge(mut self, other: ReportAccumulator) -> ReportAccumulator {
        self.notes_total += other.notes_total;
        self.notes_flagged += other.notes_flagged;
        self.by_module.reference += other.by_module.reference;
        self.by_module.frequency += other.by_module.frequency;
        self.chars_total += other.chars_total;
        self.chars_flagged += other.chars_flagged;
        self.chars_removed += other.chars_removed;
        self.labels.templated += other.labels.templated;
        self.labels.copied += other.labels.copied;
        self.labels.both += other.labels.both;
        self.modules.reference_only += other.modules.reference_only;
        self.modules.frequency_only += other.modules.frequency_only;
        self.modules.both += other.modules.both;
        for (k, o) in other.types {
            let t = self.types.entry(k).or_default();
            t.notes += o.notes;
            t.chars += o.chars;
            t.flagged += o.flagged;
            t.removed += o.removed;
            t.templated += o.templated;
            t.copied += o.copied;
        }
        self.notes.extend(other.notes);
        for (k, (c, r)) in other.patients {
            let p = self.patients.entry(k).or_default();
            p.0 += c;
            p.1 += r;
        }
        self
    }

    pub fn finish(mut self) -> CorpusReport {
        let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let mut note_types: Vec<NoteTypeRow> = self
            .types
            .iter()
            .map(|(k, t)| NoteTypeRow {
                note_type: k.clone(),
                notes: t.notes,
                chars: t.chars,
                flagged_fraction: frac(t.flagged, t.chars),
                removed_fraction: frac(t.removed, t.chars),
                templated_fraction: frac(t.templated, t.chars),
                copied_fraction: frac(t.copied, t.chars),
            })
            .collect();
        note_types.sort_by(|a, b| b.notes.cmp(&a.notes).then_with(|| a.note_type.cmp(&b.note_type)));
        self.notes.sort();
        let per_note = self.notes.iter().filter(|n| n.1 > 0).map(|n| frac(n.2, n.1)).collect();
        let per_patient = self
            .patients
            .values()
            .filter(|p| p.0 > 0)
            .map(|p| frac(p.1, p.0))
            .collect();
        CorpusReport {
            notes_total: self.notes_total,
            patients_total: self.patients.len(),
            notes_flagged: self.notes_flagged,
            notes_flagged_by_module: self.by_module,
            chars_total: self.chars_total,
            chars_flagged: self.chars_flagged,
            chars_removed: self.chars_removed,
            copied_kept_chars: self.chars_flagged - self.chars_removed,
            reduction_fraction: frac(self.chars_removed, self.chars_total),
            label_breakdown: self.labels,
            module_breakdown: self.modules,
            note_types,
            per_note_reduction: Distribution::of(per_note),
            per_patient_reduction: Distribution::of(per_patient),
            mean_chars_removed_per_patient: frac(self.chars_removed, self.patients.len()),
        }
    }
}

pub fn summarize(notes: &[(&Note, &[ResolvedSpan])]) -> CorpusReport {
    notes
        .par_iter()
        .fold(ReportAccumulator::default, |mut acc, (note, spans)| {
            acc.add(note, spans);
            acc
        })
        .reduce(ReportAccumulator::default, ReportAccumulator::merge)
        .finish()
}

/// An amount of US dollars held as integer micro-dollars.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Money {
    pub micros: i128,
}

impl Money {
    pub fn from_dollars(dollars: f64) -> Money {
        Money {
            micros: (dollars * 1e6).round() as i128,
        }
    }

    /// Rounded half away from zero to whole cents.
    pub fn cents(&self) -> i128 {
        let sign = self.micros.signum();
        sign * ((self.micros.abs() + 5_000) / 10_000)
    }

    pub fn dollars(&self) -> f64 {
        self.micros as f64 / 1e6
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cents = self.cents();
        let sign = if cents < 0 { "-" } else { "" };
        let whole = (cents.abs() / 100).to_string();
        let mut grouped = String::new();
        for (i, c) in whole.chars().enumerate() {
            if i > 0 && (whole.len() - i) % 3 == 0 {
                grouped.push(',');
            }
            grouped.push(c);
        }
        write!(f, "{sign}${grouped}.{:02}", cents.abs() % 100)
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.cents() as f64 / 100.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    pub chars_per_token: f64,
    pub price_per_million_tokens: Money,
    pub encounters_per_year: u64,
    pub queries_per_encounter: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            chars_per_token: DEFAULT_CHARS_PER_TOKEN,
            price_per_million_tokens: Money::from_dollars(21.0),
            encounters_per_year: 2_058_497,
            queries_per_encounter: 1.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.chars_per_token > 0.0) {
            return Err(MetricsError::NonPositiveRatio(self.chars_per_token));
        }
        if self.price_per_million_tokens.micros <= 0 {
            return Err(MetricsError::NonPositive("price_per_million_tokens"));
        }
        if self.encounters_per_year == 0 {
            return Err(MetricsError::NonPositive("encounters_per_year"));
        }
        if !(self.queries_per_encounter > 0.0) {
            return Err(MetricsError::NonPositive("queries_per_encounter"));
        }
        Ok(())
    }
}

pub fn estimate_tokens(chars_removed: u64, model: &CostModel) -> Result<u64, MetricsError> {
    if !(model.chars_per_token > 0.0) {
        return Err(MetricsError::NonPositiveRatio(model.chars_per_token));
    }
    Ok((chars_removed as f64 / model.chars_per_token).round() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostProjection {
    pub per_query: Money,
    pub annual: Money,
}

/// Savings per patient query and per year. Token and query counts enter as
/// thousandths so the whole product stays in integers; the annual figure is
/// computed from the unrounded per-query amount.
pub fn project_cost(tokens_saved_per_patient: f64, model: &CostModel) -> CostProjection {
    let milli_tokens = (tokens_saved_per_patient * 1000.0).round() as i128;
    let milli_queries = (model.queries_per_encounter * 1000.0).round() as i128;
    let price = model.price_per_million_tokens.micros;
    let div_round = |n: i128, d: i128| (n + d / 2).div_euclid(d);
    let per_query_scaled = milli_tokens * price; // micro-dollars × 10^9
    CostProjection {
        per_query: Money {
            micros: div_round(per_query_scaled, 1_000_000_000),
        },
        annual: Money {
            micros: div_round(
                per_query_scaled * i128::from(model.encounters_per_year) * milli_queries,
                1_000_000_000_000,
            ),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSummary {
    pub model: CostModel,
    pub tokens_removed: u64,
    /// True when token counts were supplied rather than estimated.
    pub exact_tokens: bool,
    pub patients: usize,
    pub tokens_saved_per_patient: f64,
    pub projection: CostProjection,
}

pub fn cost_summary(
    report: &CorpusReport,
    model: &CostModel,
    exact_tokens: Option<u64>,
) -> Result<CostSummary, MetricsError> {
    model.validate()?;
    let tokens_removed = match exact_tokens {
        Some(t) => t,
        None => estimate_tokens(report.chars_removed as u64, model)?,
    };
    let per_patient = if report.patients_total == 0 {
        0.0
    } else {
        tokens_removed as f64 / report.patients_total as f64
    };
    Ok(CostSummary {
        model: *model,
        tokens_removed,
        exact_tokens: exact_tokens.is_some(),
        patients: report.patients_total,
        tokens_saved_per_patient: per_patient,
        projection: project_cost(per_patient, model),
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

pub fn render_text(report: &CorpusReport, cost: Option<&CostSummary>) -> String {
    let mut s = String::new();
    let r = report;
    let _ = writeln!(s, "notes            {:>12}", r.notes_total);
    let _ = writeln!(s, "patients         {:>12}", r.patients_total);
    let _ = writeln!(s, "notes flagged    {:>12}", r.notes_flagged);
    let _ = writeln!(s, "  by reference   {:>12}", r.notes_flagged_by_module.reference);
    let _ = writeln!(s, "  by frequency   {:>12}", r.notes_flagged_by_module.frequency);
    let _ = writeln!(s, "chars            {:>12}", r.chars_total);
    let _ = writeln!(s, "chars flagged    {:>12}", r.chars_flagged);
    let _ = writeln!(s, "chars removed    {:>12}", r.chars_removed);
    let _ = writeln!(s, "copied kept      {:>12}", r.copied_kept_chars);
    let _ = writeln!(s, "reduction        {:>12}", pct(r.reduction_fraction));
    let _ = writeln!(s);
    let of_flagged = |n: usize| {
        pct(if r.chars_flagged == 0 {
            0.0
        } else {
            n as f64 / r.chars_flagged as f64
        })
    };
    let _ = writeln!(s, "label            {:>12} {:>8}", "chars", "share");
    for (name, n) in [
        ("templated", r.label_breakdown.templated),
        ("copied", r.label_breakdown.copied),
        ("both", r.label_breakdown.both),
    ] {
        let _ = writeln!(s, "  {name:<15}{n:>12} {:>8}", of_flagged(n));
    }
    let _ = writeln!(s, "module");
    for (name, n) in [
        ("reference only", r.module_breakdown.reference_only),
        ("frequency only", r.module_breakdown.frequency_only),
        ("both", r.module_breakdown.both),
    ] {
        let _ = writeln!(s, "  {name:<15}{n:>12} {:>8}", of_flagged(n));
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<28} {:>7} {:>9} {:>9} {:>9} {:>9}",
        "note type", "notes", "flagged", "removed", "templ", "copied"
    );
    for t in &r.note_types {
        let _ = writeln!(
            s,
            "{:<28} {:>7} {:>9} {:>9} {:>9} {:>9}",
            t.note_type,
            t.notes,
            pct(t.flagged_fraction),
            pct(t.removed_fraction),
            pct(t.templated_fraction),
            pct(t.copied_fraction)
        );
    }
    for (name, d) in [
        ("per-note", &r.per_note_reduction),
        ("per-patient", &r.per_patient_reduction),
    ] {
        if let Some(d) = d {
            let _ = writeln!(
                s,
                "\n{name} reduction: mean {} median {} min {} max {} (n={})",
                pct(d.mean),
                pct(d.median),
                pct(d.min),
                pct(d.max),
                d.count
            );
        }
    }
    if let Some(c) = cost {
        let _ = writeln!(s);
        let how = if c.exact_tokens { "exact" } else { "estimated" };
        let _ = writeln!(s, "tokens removed   {:>12} ({how})", c.tokens_removed);
        let _ = writeln!(s, "tokens/patient   {:>12.1}", c.tokens_saved_per_patient);
        let _ = writeln!(
            s,
            "price per 1M     {:>12}",
            c.model.price_per_million_tokens.to_string()
        );
        let _ = writeln!(s, "per query        {:>12}", c.projection.per_query.to_string());
        let _ = writeln!(
            s,
            "annual           {:>12} ({} encounters x {} queries)",
            c.projection.annual.to_string(),
            c.model.encounters_per_year,
            c.model.queries_per_encounter
        );
    }
    s
}
