use chrono::{TimeZone, Utc};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trace_core::condense::ResolvedSpan;
use trace_core::config::PipelineConfig;
use trace_core::corpus::{Corpus, Note, TemplateSource};
use trace_core::metrics::{project_cost, summarize, CostModel, Money, ReportAccumulator};
use trace_core::pipeline::run_pipeline;
use trace_core::span::{Action, Label, Module};

fn random_text(rng: &mut ChaCha8Rng, alphabet: &str, len: usize) -> String {
    let chars: Vec<char> = alphabet.chars().collect();
    (0..len).map(|_| chars[rng.gen_range(0..chars.len())]).collect()
}

fn note(id: &str, day: u32, text: String) -> Note {
    Note {
        note_id: id.into(),
        patient_id: "p1".into(),
        filed_at: Utc.with_ymd_and_hms(2022, 6, day, 10, 0, 0).unwrap(),
        note_type: "Progress Notes".into(),
        text,
        template_sources: vec![],
        copy_source_ids: vec![],
    }
}

/// Two notes of 1,000 characters: 600 templated characters, 200 copied
/// forward from the first note, the rest authored. Disjoint alphabets keep
/// the alignments exact.
#[test]
fn report_matches_construction() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t1 = random_text(&mut rng, "klmno", 300);
    let a1 = random_text(&mut rng, "abcdefghij", 700);
    let t2 = random_text(&mut rng, "pqrst", 300);
    let a2 = random_text(&mut rng, "uvwxyz", 500);
    let copied: String = a1.chars().skip(100).take(200).collect();

    let mut n1 = note("n1", 1, format!("{t1}{a1}"));
    n1.template_sources = vec![TemplateSource {
        template_id: "T1".into(),
        text: t1,
    }];
    let mut n2 = note("n2", 2, format!("{t2}{a2}{copied}"));
    n2.template_sources = vec![TemplateSource {
        template_id: "T2".into(),
        text: t2,
    }];
    n2.copy_source_ids = vec!["n1".into()];
    let corpus = Corpus::from_notes(vec![n1, n2]).unwrap();

    let config = PipelineConfig {
        workers: 2,
        ..Default::default()
    };
    let r = run_pipeline(&corpus, &config).unwrap().report;
    assert_eq!(r.chars_total, 2000);
    assert_eq!(r.chars_removed, 800);
    assert_eq!(r.reduction_fraction, 0.4);
    assert_eq!(r.label_breakdown.templated, 600);
    assert_eq!(r.label_breakdown.copied, 200);
    assert_eq!(r.label_breakdown.both, 0);
    assert_eq!(r.chars_flagged, 800);
    assert_eq!(r.module_breakdown.reference_only, 800);
    assert_eq!(r.notes_flagged, 2);
    assert_eq!(r.per_patient_reduction.unwrap().median, 0.4);
}

fn span(start: usize, end: usize, label: Label, module: Module, action: Action) -> ResolvedSpan {
    ResolvedSpan {
        note_id: String::new(),
        start,
        end,
        label,
        modules: vec![module],
        source_ids: vec![],
        action,
        members: vec![],
    }
}

fn random_annotated(seed: u64, n: usize) -> Vec<(Note, Vec<ResolvedSpan>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(0..400);
            let mut note = note(&format!("n{i}"), 1 + (i % 28) as u32, "x".repeat(len));
            note.patient_id = format!("p{}", i % 5);
            note.note_type = ["A", "B", "C"][i % 3].into();
            let mut spans = Vec::new();
            let mut cursor = 0;
            while cursor + 20 < len && rng.gen_bool(0.7) {
                let start = cursor + rng.gen_range(0..10);
                let end = (start + rng.gen_range(1..60)).min(len);
                let label = [Label::Templated, Label::Copied, Label::Both][rng.gen_range(0..3)];
                let action = if label.is_templated() {
                    Action::Remove
                } else if rng.gen_bool(0.5) {
                    Action::KeepFirstInstanceKept
                } else {
                    Action::KeepFirstInstanceRemoved
                };
                let module = if rng.gen_bool(0.5) {
                    Module::Reference
                } else {
                    Module::Frequency
                };
                spans.push(span(start, end, label, module, action));
                cursor = end + 1;
            }
            (note, spans)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn report_ignores_order_and_sharding(seed in any::<u64>(), cut in 0usize..40) {
        let data = random_annotated(seed, 40);
        let pairs: Vec<(&Note, &[ResolvedSpan])> = data.iter().map(|(n, s)| (n, s.as_slice())).collect();
        let whole = summarize(&pairs);
        let mut reversed = pairs.clone();
        reversed.reverse();
        prop_assert_eq!(summarize(&reversed), whole.clone());
        let fold = |part: &[(&Note, &[ResolvedSpan])]| {
            let mut acc = ReportAccumulator::default();
            for (n, s) in part {
                acc.add(n, s);
            }
            acc
        };
        let merged = fold(&pairs[cut..]).merge(fold(&pairs[..cut])).finish();
        prop_assert_eq!(merged, whole.clone());

        let l = whole.label_breakdown;
        let m = whole.module_breakdown;
        prop_assert_eq!(l.templated + l.copied + l.both, whole.chars_removed + whole.copied_kept_chars);
        prop_assert_eq!(m.reference_only + m.frequency_only + m.both, whole.chars_flagged);
    }

    #[test]
    fn cost_is_linear(tokens in 1u32..1_000_000, price in 1u32..100_000, enc in 1u64..10_000, k in 2u32..20) {
        let model = CostModel {
            price_per_million_tokens: Money { micros: i128::from(price) },
            encounters_per_year: enc,
            queries_per_encounter: 1.0,
            ..CostModel::default()
        };
        let base = project_cost(f64::from(tokens), &model).annual.micros;
        let k128 = i128::from(k);
        // Each scaling is exact up to the final rounding to micro-dollars.
        let close = |a: i128, b: i128| (a - b).abs() <= k128;
        prop_assert!(close(project_cost(f64::from(tokens * k), &model).annual.micros, base * k128));
        let priced = CostModel { price_per_million_tokens: Money { micros: i128::from(price) * k128 }, ..model };
        prop_assert!(close(project_cost(f64::from(tokens), &priced).annual.micros, base * k128));
        let busier = CostModel { encounters_per_year: enc * u64::from(k), ..model };
        prop_assert!(close(project_cost(f64::from(tokens), &busier).annual.micros, base * k128));
        let chattier = CostModel { queries_per_encounter: f64::from(k), ..model };
        prop_assert!(close(project_cost(f64::from(tokens), &chattier).annual.micros, base * k128));
    }
}
