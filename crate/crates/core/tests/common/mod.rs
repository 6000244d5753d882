//! Test-only oracles. Nothing here calls into the code paths it checks.
#![allow(dead_code)]

/// Brute-force recursive longest-common-substring matching.
///
/// Every (source, note) start pair is extended character by character. The
/// longest run wins; ties go to the earliest source start, then the earliest
/// note start. Returns `(source_start, note_start, len)` triples in order.
pub fn brute_force_blocks(source: &[char], note: &[char]) -> Vec<(usize, usize, usize)> {
    fn recurse(
        a: &[char],
        b: &[char],
        (alo, ahi): (usize, usize),
        (blo, bhi): (usize, usize),
        out: &mut Vec<(usize, usize, usize)>,
    ) {
        let mut best = (alo, blo, 0usize);
        for i in alo..ahi {
            for j in blo..bhi {
                let mut k = 0;
                while i + k < ahi && j + k < bhi && a[i + k] == b[j + k] {
                    k += 1;
                }
                if k > best.2 {
                    best = (i, j, k);
                }
            }
        }
        let (i, j, k) = best;
        if k == 0 {
            return;
        }
        recurse(a, b, (alo, i), (blo, j), out);
        out.push(best);
        recurse(a, b, (i + k, ahi), (j + k, bhi), out);
    }
    let mut out = Vec::new();
    recurse(source, note, (0, source.len()), (0, note.len()), &mut out);
    out
}

/// Per-character gold label, as used by the evaluation oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CharGold {
    Unlabeled,
    Author,
    Templated,
    Structured,
}

/// Character-level precision/recall computed one character at a time.
///
/// `gold` lists `(start, end, label)`. A character is templated when any
/// templated entry covers it.
/// Returns `(precision, recall)`, each `None` when its denominator is zero.
pub fn brute_force_precision_recall(
    len: usize,
    predicted: &[(usize, usize)],
    gold: &[(usize, usize, CharGold)],
    min_gold_span: usize,
) -> (Option<f64>, Option<f64>) {
    let mut is_pred = vec![false; len];
    for &(s, e) in predicted {
        for c in s..e {
            is_pred[c] = true;
        }
    }
    let mut templated = vec![false; len];
    let mut eligible = vec![false; len];
    for &(s, e, label) in gold {
        for c in s..e {
            if label == CharGold::Templated {
                templated[c] = true;
                if e - s >= min_gold_span {
                    eligible[c] = true;
                }
            }
        }
    }
    let mut flagged = 0usize;
    let mut tp = 0usize;
    let mut elig = 0usize;
    let mut hit = 0usize;
    for c in 0..len {
        if is_pred[c] {
            flagged += 1;
            if templated[c] {
                tp += 1;
            }
        }
        if eligible[c] {
            elig += 1;
            if is_pred[c] {
                hit += 1;
            }
        }
    }
    let p = (flagged > 0).then(|| tp as f64 / flagged as f64);
    let r = (elig > 0).then(|| hit as f64 / elig as f64);
    (p, r)
}
