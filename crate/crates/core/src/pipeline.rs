//! End-to-end orchestration: reference module, frequency module over the
//! reference-condensed text, pooled resolution, de-duplication, condensing
//! and reporting.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::condense::{
    apply_dedup_policy, condense_note, resolve_overlaps, write_condensed, write_sidecar, AnnotatedNote, CondenseError,
    GroupOutcome, OffsetMap, PlanMap, ResolvedSpan, SidecarRecord,
};
use crate::config::{ConfigError, PipelineConfig};
use crate::corpus::{Corpus, CorpusError, Note};
use crate::frequency::{build_index_sharded, label_chunks, ChunkIndex, ChunkedNote, IndexError};
use crate::metrics::{cost_summary, render_text, summarize, CorpusReport, CostSummary, MetricsError};
use crate::reference::{run_reference_module, ProvenanceWarning};
use crate::span::{FlaggedSpan, Module};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Condense(#[from] CondenseError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot start worker pool: {0}")]
    Pool(String),
    #[error("sidecar refers to note {0:?}, which is not in the corpus")]
    UnknownNote(String),
}

#[derive(Debug, Clone, Default)]
pub struct StageTimings {
    pub reference: Duration,
    pub index: Duration,
    pub frequency: Duration,
    pub condense: Duration,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// One entry per corpus note, in timeline order.
    pub annotated: Vec<AnnotatedNote>,
    pub warnings: Vec<ProvenanceWarning>,
    pub groups: Vec<GroupOutcome>,
    pub index: Option<ChunkIndex>,
    pub report: CorpusReport,
    pub alignments: usize,
    pub timings: StageTimings,
}

/// Runs `f` on a pool of exactly `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

pub fn run_pipeline(corpus: &Corpus, config: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    with_workers(config.workers, || run_in_pool(corpus, config))?
}

fn resolve_all(notes: &[&Note], spans: Vec<Vec<FlaggedSpan>>) -> Result<PlanMap, CondenseError> {
    let resolved: Vec<(String, Vec<ResolvedSpan>)> = notes
        .par_iter()
        .zip(spans.into_par_iter())
        .map(|(note, spans)| resolve_overlaps(&spans, note).map(|r| (note.note_id.clone(), r)))
        .collect::<Result<_, _>>()?;
    Ok(resolved.into_iter().collect())
}

fn condense_all(
    notes: &[&Note],
    mut plans: PlanMap,
    marker: Option<&str>,
) -> Result<Vec<AnnotatedNote>, CondenseError> {
    let jobs: Vec<(&Note, Vec<ResolvedSpan>)> = notes
        .iter()
        .map(|n| (*n, plans.remove(&n.note_id).unwrap_or_default()))
        .collect();
    jobs.into_par_iter()
        .map(|(note, spans)| condense_note(note, spans, marker))
        .collect()
}

fn run_in_pool(corpus: &Corpus, config: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let notes: Vec<&Note> = corpus.notes().collect();
    let mut timings = StageTimings::default();
    let mut warnings = Vec::new();
    let mut alignments = 0;

    let clock = Instant::now();
    let mut pooled: Vec<Vec<FlaggedSpan>> = vec![Vec::new(); notes.len()];
    if config.uses(Module::Reference) {
        let outputs: Vec<_> = notes
            .par_iter()
            .map(|note| run_reference_module(note, corpus, &config.reference))
            .collect();
        for (slot, out) in pooled.iter_mut().zip(outputs) {
            slot.extend(out.spans.iter().map(|s| s.to_flagged()));
            alignments += out.alignments;
            warnings.extend(out.warnings);
        }
    }
    timings.reference = clock.elapsed();

    let mut index = None;
    if config.uses(Module::Frequency) {
        // Frequency counting sees the text left after reference removal.
        let clock = Instant::now();
        let intermediate: Vec<(String, OffsetMap)> = if config.uses(Module::Reference) {
            let mut plans = resolve_all(&notes, pooled.clone())?;
            apply_dedup_policy(corpus, &mut plans);
            condense_all(&notes, plans, None)?
                .into_iter()
                .map(|a| (a.condensed_text, a.offsets))
                .collect()
        } else {
            notes
                .iter()
                .map(|n| (n.text.clone(), OffsetMap::identity(n.char_len())))
                .collect()
        };
        let chunked: Vec<ChunkedNote> = notes
            .par_iter()
            .zip(intermediate.par_iter())
            .map(|(note, (text, _))| {
                ChunkedNote::new(
                    &note.note_id,
                    &note.patient_id,
                    text,
                    config.frequency.min_nonspace_chars,
                )
            })
            .collect();
        let built = match &config.index_in {
            Some(path) => ChunkIndex::read(path)?,
            None => build_index_sharded(&chunked, config.shards()),
        };
        if let Some(path) = &config.index_out {
            built.write(path)?;
        }
        timings.index = clock.elapsed();

        let clock = Instant::now();
        let found: Vec<Vec<FlaggedSpan>> = chunked
            .par_iter()
            .zip(intermediate.par_iter())
            .map(|(cn, (_, offsets))| {
                label_chunks(&built, cn, &config.frequency)
                    .into_iter()
                    .map(|s| {
                        let mut flagged = s.to_flagged(&cn.patient_id);
                        (flagged.start, flagged.end) = offsets.range_to_original(s.start, s.end);
                        flagged
                    })
                    .collect()
            })
            .collect();
        for (slot, spans) in pooled.iter_mut().zip(found) {
            slot.extend(spans);
        }
        index = Some(built);
        timings.frequency = clock.elapsed();
    }

    let clock = Instant::now();
    let mut plans = resolve_all(&notes, pooled)?;
    let groups = apply_dedup_policy(corpus, &mut plans);
    let annotated = condense_all(&notes, plans, config.marker.as_deref())?;
    timings.condense = clock.elapsed();

    let pairs: Vec<(&Note, &[ResolvedSpan])> = annotated.iter().map(|a| (&a.note, a.spans.as_slice())).collect();
    let report = summarize(&pairs);
    Ok(PipelineOutput {
        annotated,
        warnings,
        groups,
        index,
        report,
        alignments,
        timings,
    })
}

#[derive(Serialize)]
struct ReportFile<'a> {
    corpus: &'a CorpusReport,
    cost: &'a CostSummary,
}

pub struct OutputPaths {
    pub condensed: PathBuf,
    pub sidecar: PathBuf,
    pub report_json: PathBuf,
    pub report_txt: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            condensed: dir.join("condensed.jsonl"),
            sidecar: dir.join("annotations.jsonl"),
            report_json: dir.join("report.json"),
            report_txt: dir.join("report.txt"),
        }
    }
}

pub fn write_report(
    report: &CorpusReport,
    config: &PipelineConfig,
    json_path: &Path,
    txt_path: &Path,
) -> Result<CostSummary, PipelineError> {
    let cost = cost_summary(report, &config.cost, config.exact_tokens)?;
    let json = serde_json::to_string_pretty(&ReportFile {
        corpus: report,
        cost: &cost,
    })
    .expect("report serializes");
    write_file(json_path, &(json + "\n"))?;
    write_file(txt_path, &render_text(report, Some(&cost)))?;
    Ok(cost)
}

fn write_file(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_outputs(
    dir: &Path,
    output: &PipelineOutput,
    config: &PipelineConfig,
) -> Result<OutputPaths, PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let paths = OutputPaths::in_dir(dir);
    write_condensed(&paths.condensed, &output.annotated)?;
    write_sidecar(&paths.sidecar, &output.annotated)?;
    write_report(&output.report, config, &paths.report_json, &paths.report_txt)?;
    Ok(paths)
}

/// Pairs sidecar spans with their corpus notes, in corpus order. Notes
/// without a sidecar record get no spans.
pub fn attach_sidecar(
    corpus: &Corpus,
    records: Vec<SidecarRecord>,
) -> Result<Vec<(Note, Vec<ResolvedSpan>)>, PipelineError> {
    let mut by_id: std::collections::HashMap<String, Vec<ResolvedSpan>> = std::collections::HashMap::new();
    for r in records {
        if corpus.note(&r.note_id).is_none() {
            return Err(PipelineError::UnknownNote(r.note_id));
        }
        by_id.insert(r.note_id, r.spans);
    }
    Ok(corpus
        .notes()
        .map(|n| (n.clone(), by_id.remove(&n.note_id).unwrap_or_default()))
        .collect())
}
