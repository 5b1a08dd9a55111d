//! Scoring decoded feature sequences against references.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{FeatureSequence, Segment};

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Match,
    Substitution,
    Insertion,
    Deletion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub reference: Option<Segment>,
    pub hypothesis: Option<Segment>,
    pub kind: PairKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Alignment {
    pub pairs: Vec<AlignedPair>,
}

impl Alignment {
    pub fn count(&self, kind: PairKind) -> usize {
        self.pairs.iter().filter(|p| p.kind == kind).count()
    }
}

fn overlap(a: &Segment, b: &Segment) -> usize {
    a.end.min(b.end).saturating_sub(a.start.max(b.start))
}

fn span(segments: &[Segment]) -> Option<(usize, usize)> {
    Some((segments.first()?.start, segments.last()?.end))
}

/// Greedy overlap alignment of non-default segments. A hypothesis segment
/// may pair with a reference segment when their overlap is at least
/// `overlap_threshold` times the reference length; candidate pairs are taken
/// by descending overlap, ties by earliest reference then hypothesis start.
pub fn align(
    reference: &FeatureSequence,
    hypothesis: &FeatureSequence,
    default_label: &str,
    overlap_threshold: f64,
) -> Result<Alignment> {
    if !(overlap_threshold > 0.0 && overlap_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "overlap threshold must lie in (0, 1], got {overlap_threshold}"
        )));
    }
    let (rs, hs) = (span(&reference.segments), span(&hypothesis.segments));
    if rs != hs {
        return Err(Error::invalid(format!(
            "reference covers {rs:?} but hypothesis covers {hs:?}"
        )));
    }
    let refs: Vec<&Segment> = reference.segments.iter().filter(|s| s.label != default_label).collect();
    let hyps: Vec<&Segment> = hypothesis.segments.iter().filter(|s| s.label != default_label).collect();

    let mut candidates = Vec::new();
    for (r, rseg) in refs.iter().enumerate() {
        for (h, hseg) in hyps.iter().enumerate() {
            let ov = overlap(rseg, hseg);
            if ov > 0 && ov as f64 >= overlap_threshold * rseg.len() as f64 {
                candidates.push((ov, rseg.start, hseg.start, r, h));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut ref_pair: Vec<Option<usize>> = vec![None; refs.len()];
    let mut hyp_used = vec![false; hyps.len()];
    for (_, _, _, r, h) in candidates {
        if ref_pair[r].is_none() && !hyp_used[h] {
            ref_pair[r] = Some(h);
            hyp_used[h] = true;
        }
    }

    let mut pairs = Vec::with_capacity(refs.len() + hyps.len());
    for (r, rseg) in refs.iter().enumerate() {
        pairs.push(match ref_pair[r] {
            Some(h) => AlignedPair {
                reference: Some((*rseg).clone()),
                hypothesis: Some(hyps[h].clone()),
                kind: if hyps[h].label == rseg.label {
                    PairKind::Match
                } else {
                    PairKind::Substitution
                },
            },
            None => AlignedPair {
                reference: Some((*rseg).clone()),
                hypothesis: None,
                kind: PairKind::Deletion,
            },
        });
    }
    for (h, hseg) in hyps.iter().enumerate() {
        if !hyp_used[h] {
            pairs.push(AlignedPair {
                reference: None,
                hypothesis: Some((*hseg).clone()),
                kind: PairKind::Insertion,
            });
        }
    }
    Ok(Alignment { pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub recognized: f64,
    pub substituted: f64,
    pub deleted: f64,
    pub inserted: f64,
}

/// Aggregated scores. `confusion[r][h]` counts reference label `r`
/// recognized as model `h`; `insertions[h]` and `deletions[r]` border it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    pub insertions: Vec<usize>,
    pub deletions: Vec<usize>,
    pub seen: usize,
    pub recognized: usize,
    pub substituted: usize,
    pub deleted: usize,
    pub inserted: usize,
    pub rates: Rates,
}

fn percent(count: usize, seen: usize) -> f64 {
    if seen == 0 {
        0.0
    } else {
        100.0 * count as f64 / seen as f64
    }
}

pub fn report(alignments: &[Alignment]) -> Result<EvaluationReport> {
    if alignments.is_empty() {
        return Err(Error::invalid("no alignments to report"));
    }
    let labels: Vec<String> = alignments
        .iter()
        .flat_map(|a| &a.pairs)
        .flat_map(|p| p.reference.iter().chain(&p.hypothesis))
        .map(|s| s.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index = |label: &str| labels.binary_search_by(|l| l.as_str().cmp(label)).expect("label collected");
    let l = labels.len();
    let mut confusion = vec![vec![0; l]; l];
    let mut insertions = vec![0; l];
    let mut deletions = vec![0; l];
    for p in alignments.iter().flat_map(|a| &a.pairs) {
        match (&p.reference, &p.hypothesis) {
            (Some(r), Some(h)) => confusion[index(&r.label)][index(&h.label)] += 1,
            (Some(r), None) => deletions[index(&r.label)] += 1,
            (None, Some(h)) => insertions[index(&h.label)] += 1,
            (None, None) => {}
        }
    }
    let recognized: usize = (0..l).map(|i| confusion[i][i]).sum();
    let matched: usize = confusion.iter().flatten().sum();
    let substituted = matched - recognized;
    let deleted: usize = deletions.iter().sum();
    let inserted: usize = insertions.iter().sum();
    let seen = matched + deleted;
    Ok(EvaluationReport {
        rates: Rates {
            recognized: percent(recognized, seen),
            substituted: percent(substituted, seen),
            deleted: percent(deleted, seen),
            inserted: percent(inserted, seen),
        },
        labels,
        confusion,
        insertions,
        deletions,
        seen,
        recognized,
        substituted,
        deleted,
        inserted,
    })
}

impl EvaluationReport {
    /// Times reference label `r` was seen.
    pub fn seen_of(&self, r: usize) -> usize {
        self.confusion[r].iter().sum::<usize>() + self.deletions[r]
    }

    /// Confusion table with one column per reference feature and one row
    /// per recognizing model, followed by the global rates.
    pub fn to_text(&self) -> String {
        let l = self.labels.len();
        let width = self.labels.iter().map(String::len).max().unwrap_or(0).max(7) + 2;
        let mut out = String::new();
        let cell = |out: &mut String, s: &str| {
            let _ = write!(out, "{s:>width$}");
        };
        cell(&mut out, "");
        for label in &self.labels {
            cell(&mut out, label);
        }
        cell(&mut out, "Ins");
        out.push('\n');
        for h in 0..l {
            cell(&mut out, &self.labels[h]);
            for r in 0..l {
                cell(&mut out, &self.confusion[r][h].to_string());
            }
            cell(&mut out, &self.insertions[h].to_string());
            out.push('\n');
        }
        cell(&mut out, "Del");
        for r in 0..l {
            cell(&mut out, &self.deletions[r].to_string());
        }
        out.push('\n');
        cell(&mut out, "Total");
        for r in 0..l {
            cell(&mut out, &self.seen_of(r).to_string());
        }
        out.push('\n');
        cell(&mut out, "% reco");
        for r in 0..l {
            cell(&mut out, &format!("{:.0}", percent(self.confusion[r][r], self.seen_of(r))));
        }
        out.push_str("\n\n");
        let _ = writeln!(out, "{:<12}{:>8}{:>8}", "", "count", "%");
        for (name, count, rate) in [
            ("Seen", self.seen, 100.0 * f64::from(u8::from(self.seen > 0))),
            ("Recognized", self.recognized, self.rates.recognized),
            ("Substituted", self.substituted, self.rates.substituted),
            ("Deleted", self.deleted, self.rates.deleted),
            ("Inserted", self.inserted, self.rates.inserted),
        ] {
            let _ = writeln!(out, "{name:<12}{count:>8}{rate:>8.0}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs(segs: &[(&str, usize, usize)]) -> FeatureSequence {
        FeatureSequence {
            segments: segs.iter().map(|&(l, s, e)| Segment::new(l, s, e)).collect(),
            log_joint: 0.0,
        }
    }

    fn kinds(a: &Alignment) -> Vec<PairKind> {
        a.pairs.iter().map(|p| p.kind).collect()
    }

    #[test]
    fn match_substitution_insertion_deletion() {
        let r = fs(&[("c", 0, 10), ("A", 10, 40), ("c", 40, 80)]);
        let a = align(&r, &fs(&[("c", 0, 12), ("A", 12, 38), ("c", 38, 80)]), "c", 0.5).unwrap();
        assert_eq!(kinds(&a), vec![PairKind::Match]);
        let a = align(&r, &fs(&[("c", 0, 12), ("B", 12, 38), ("c", 38, 80)]), "c", 0.5).unwrap();
        assert_eq!(kinds(&a), vec![PairKind::Substitution]);
        let a = align(&r, &fs(&[("c", 0, 10), ("A", 10, 40), ("c", 40, 60), ("C", 60, 70), ("c", 70, 80)]), "c", 0.5)
            .unwrap();
        assert_eq!(kinds(&a), vec![PairKind::Match, PairKind::Insertion]);
        let r2 = fs(&[("A", 0, 20), ("B", 20, 40)]);
        let a = align(&r2, &fs(&[("A", 0, 20), ("c", 20, 40)]), "c", 0.5).unwrap();
        assert_eq!(kinds(&a), vec![PairKind::Match, PairKind::Deletion]);
    }

    #[test]
    fn range_mismatch_rejected() {
        assert!(align(&fs(&[("A", 0, 10)]), &fs(&[("A", 0, 11)]), "c", 0.5).is_err());
    }

    #[test]
    fn global_rates_table() {
        let seg = |l: &str| Some(Segment::new(l, 0, 1));
        let mut pairs = Vec::new();
        let push = |pairs: &mut Vec<AlignedPair>, n, r: Option<Segment>, h: Option<Segment>, kind| {
            for _ in 0..n {
                pairs.push(AlignedPair { reference: r.clone(), hypothesis: h.clone(), kind });
            }
        };
        push(&mut pairs, 130, seg("A"), seg("A"), PairKind::Match);
        push(&mut pairs, 12, seg("A"), seg("B"), PairKind::Substitution);
        push(&mut pairs, 2, seg("A"), None, PairKind::Deletion);
        push(&mut pairs, 60, None, seg("B"), PairKind::Insertion);
        let rep = report(&[Alignment { pairs }]).unwrap();
        assert_eq!((rep.seen, rep.recognized, rep.deleted, rep.inserted), (144, 130, 2, 60));
        assert_eq!(rep.rates.recognized.round(), 90.0);
        assert_eq!(rep.rates.deleted.round(), 1.0);
        assert_eq!(rep.rates.inserted.round(), 42.0);
        let text = rep.to_text();
        assert!(text.contains("Ins") && text.contains("% reco") && text.contains("Del"));
    }

    #[test]
    fn single_match_is_full_recognition() {
        let r = fs(&[("A", 0, 10)]);
        let rep = report(&[align(&r, &r, "c", 0.5).unwrap()]).unwrap();
        assert_eq!((rep.seen, rep.recognized), (1, 1));
        assert_eq!(rep.rates.recognized, 100.0);
    }

    #[test]
    fn empty_report_rejected() {
        assert!(report(&[]).is_err());
    }
}
