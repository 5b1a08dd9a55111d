//! Runs, labels and corpora: CSV/JSONL ingestion, rule-based segmentation,
//! first-derivative features and a seeded synthetic run generator.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cli::io::write_atomic;
use crate::error::{Error, Result};
use crate::grammar::{Grammar, GrammarEdge, GrammarNode, Segment};
use crate::model::ObservationSequence;

pub const LABELS_FILE: &str = "labels.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Recorded,
    Synthetic,
}

/// A run with its ground-truth feature segments.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRun {
    pub run_id: String,
    pub seq: ObservationSequence,
    pub segments: Vec<Segment>,
    pub provenance: Provenance,
    pub scenario_seed: Option<u64>,
}

impl LabeledRun {
    /// Segments must be nonempty, ordered and contiguous, covering `[0, T)`.
    pub fn validate(&self) -> Result<()> {
        check_segments(&self.segments, self.seq.len()).map_err(|message| Error::RunValidation {
            run: self.run_id.clone(),
            message,
        })
    }
}

fn check_segments(segments: &[Segment], len: usize) -> std::result::Result<(), String> {
    let mut cursor = 0;
    for (i, s) in segments.iter().enumerate() {
        if s.end > len {
            return Err(format!("segment {i} ends at {} beyond {len} frames", s.end));
        }
        if s.start >= s.end {
            return Err(format!("segment {i} [{}, {}) is empty", s.start, s.end));
        }
        if s.start < cursor {
            return Err(format!("segment {i} starting at {} overlaps its predecessor", s.start));
        }
        if s.start > cursor {
            return Err(format!("gap before segment {i} at frames [{cursor}, {})", s.start));
        }
        cursor = s.end;
    }
    if cursor != len {
        return Err(format!("segments cover [0, {cursor}) of {len} frames"));
    }
    Ok(())
}

/// One line of the labels file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub run_id: String,
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "is_recorded")]
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_seed: Option<u64>,
}

fn is_recorded(p: &Provenance) -> bool {
    *p == Provenance::Recorded
}

pub fn read_frames_csv(path: &Path, run_id: &str) -> Result<ObservationSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_frames_csv(&text, run_id)
}

pub fn parse_frames_csv(text: &str, run_id: &str) -> Result<ObservationSequence> {
    let invalid = |message: String| Error::RunValidation {
        run: run_id.to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| invalid(format!("header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut frames = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // row 1 is the header
        let row = i + 2;
        let record = record.map_err(|e| invalid(format!("row {row}: {e}")))?;
        if record.len() != header.len() {
            return Err(invalid(format!(
                "row {row} has {} cells, header has {}",
                record.len(),
                header.len()
            )));
        }
        let mut frame = Vec::with_capacity(record.len());
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| invalid(format!("row {row}, column {}: `{cell}` is not a number", c + 1)))?;
            frame.push(v);
        }
        frames.push(frame);
    }
    ObservationSequence::new(frames, 1.0, header).map_err(|e| invalid(e.to_string()))
}

pub fn frames_to_csv(seq: &ObservationSequence) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(&seq.channel_names).expect("in-memory write");
    for frame in seq.frames() {
        writer
            .write_record(frame.iter().map(|v| v.to_string()))
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed(format!("labels line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn labels_to_jsonl(records: &[LabelRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("label record serializes"));
        out.push('\n');
    }
    out
}

/// Load every run listed in `labels`, reading `<runs_dir>/<run_id>.csv`.
pub fn load_runs(runs_dir: &Path, labels: &Path) -> Result<Vec<LabeledRun>> {
    let records = read_labels(labels)?;
    let mut runs = Vec::with_capacity(records.len());
    for rec in records {
        let seq = read_frames_csv(&runs_dir.join(format!("{}.csv", rec.run_id)), &rec.run_id)?;
        let run = LabeledRun {
            run_id: rec.run_id,
            seq,
            segments: rec.segments,
            provenance: rec.provenance,
            scenario_seed: rec.scenario_seed,
        };
        run.validate()?;
        runs.push(run);
    }
    Ok(runs)
}

/// Write `<dir>/<run_id>.csv` per run plus `<dir>/labels.jsonl`.
pub fn save_runs(runs: &[LabeledRun], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(runs.len());
    for run in runs {
        run.validate()?;
        write_atomic(&dir.join(format!("{}.csv", run.run_id)), frames_to_csv(&run.seq).as_bytes())?;
        records.push(LabelRecord {
            run_id: run.run_id.clone(),
            segments: run.segments.clone(),
            provenance: run.provenance,
            scenario_seed: run.scenario_seed,
        });
    }
    write_atomic(&dir.join(LABELS_FILE), labels_to_jsonl(&records).as_bytes())
}

/// Frame `t` of the output is frame `t + 1` minus frame `t` of the input.
pub fn first_derivative(seq: &ObservationSequence) -> Result<ObservationSequence> {
    if seq.len() < 2 {
        return Err(Error::invalid("first derivative needs at least 2 frames"));
    }
    let frames = seq
        .frames()
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect())
        .collect();
    let names = seq.channel_names.iter().map(|n| format!("{n}_delta")).collect();
    ObservationSequence::new(frames, seq.frame_period, names)
}

/// Derivative frame `t` describes the change into original frame `t + 1`,
/// so original segment `[s, e)` maps to derivative frames `[s - 1, e - 1)`
/// (clipped at 0). Segments that vanish are dropped and their neighbours
/// joined.
pub fn derivative_segments(segments: &[Segment]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for s in segments {
        let start = s.start.saturating_sub(1);
        let end = s.end.saturating_sub(1);
        if end <= start {
            continue;
        }
        match out.last_mut() {
            Some(last) if last.label == s.label => last.end = end,
            _ => out.push(Segment::new(s.label.clone(), start, end)),
        }
    }
    // a dropped segment leaves a gap that the next one absorbs
    for i in 1..out.len() {
        let prev_end = out[i - 1].end;
        out[i].start = prev_end;
    }
    out
}

/// Inverse of [`derivative_segments`] for a decode over derivative frames:
/// shift by one and let the first segment start at frame 0.
pub fn restore_segments(segments: &[Segment]) -> Vec<Segment> {
    segments
        .iter()
        .enumerate()
        .map(|(i, s)| Segment::new(s.label.clone(), if i == 0 { 0 } else { s.start + 1 }, s.end + 1))
        .collect()
}

pub fn derivative_run(run: &LabeledRun) -> Result<LabeledRun> {
    Ok(LabeledRun {
        run_id: run.run_id.clone(),
        seq: first_derivative(&run.seq)?,
        segments: derivative_segments(&run.segments),
        provenance: run.provenance,
        scenario_seed: run.scenario_seed,
    })
}

/// Coarse rule marking one feature: onset when the first listed channel
/// rises by more than `rise` in one frame, offset when the last listed
/// channel falls by more than `fall` in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRule {
    pub label: String,
    pub channels: Vec<usize>,
    pub rise: f64,
    pub fall: f64,
    pub min_duration: usize,
}

impl SegmentationRule {
    fn validate(&self, dim: usize) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid(format!("rule `{}` lists no channels", self.label)));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c >= dim) {
            return Err(Error::invalid(format!(
                "rule `{}` uses channel {c} of a {dim}-channel run",
                self.label
            )));
        }
        if !(self.rise > 0.0 && self.fall > 0.0) {
            return Err(Error::invalid(format!("rule `{}` needs positive thresholds", self.label)));
        }
        if self.min_duration == 0 {
            return Err(Error::invalid(format!("rule `{}` needs min_duration >= 1", self.label)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutcome {
    pub run: LabeledRun,
    /// Onsets still open at the end of the run.
    pub discarded_onsets: usize,
    /// Closed segments shorter than their rule's minimum duration.
    pub short_segments: usize,
}

/// Scan a run for rule onsets and offsets and label what lies between;
/// everything else gets `default_label`. One feature is open at a time; when
/// several rules fire on the same frame the first in `rules` wins.
pub fn segment_run(
    run_id: &str,
    seq: &ObservationSequence,
    rules: &[SegmentationRule],
    default_label: &str,
) -> Result<SegmentationOutcome> {
    for r in rules {
        r.validate(seq.dim())?;
    }
    let delta = |t: usize, c: usize| seq.frame(t)[c] - seq.frame(t - 1)[c];
    let mut features: Vec<Segment> = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    let mut short_segments = 0;
    for t in 1..seq.len() {
        match open {
            None => {
                open = rules
                    .iter()
                    .position(|r| delta(t, r.channels[0]) > r.rise)
                    .map(|r| (r, t));
            }
            Some((r, start)) => {
                let rule = &rules[r];
                let last = *rule.channels.last().expect("validated nonempty");
                if delta(t, last) < -rule.fall {
                    if t - start >= rule.min_duration {
                        features.push(Segment::new(rule.label.clone(), start, t));
                    } else {
                        short_segments += 1;
                    }
                    open = None;
                }
            }
        }
    }
    let discarded_onsets = usize::from(open.is_some());
    if discarded_onsets > 0 {
        log::warn!("{run_id}: onset without offset discarded at end of run");
    }

    let mut segments = Vec::new();
    let mut cursor = 0;
    for f in features {
        if f.start > cursor {
            segments.push(Segment::new(default_label, cursor, f.start));
        }
        cursor = f.end;
        segments.push(f);
    }
    if cursor < seq.len() {
        segments.push(Segment::new(default_label, cursor, seq.len()));
    }
    let run = LabeledRun {
        run_id: run_id.to_string(),
        seq: seq.clone(),
        segments,
        provenance: Provenance::Recorded,
        scenario_seed: None,
    };
    run.validate()?;
    Ok(SegmentationOutcome {
        run,
        discarded_onsets,
        short_segments,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpora {
    pub by_label: BTreeMap<String, Vec<ObservationSequence>>,
    /// Segments dropped for being shorter than 3 frames.
    pub excluded: usize,
}

/// Group labeled segments of all runs into one corpus per label.
pub fn build_corpora(runs: &[LabeledRun]) -> Result<Corpora> {
    let mut out = Corpora::default();
    for run in runs {
        run.validate()?;
        for s in &run.segments {
            if s.len() < 3 {
                out.excluded += 1;
                continue;
            }
            out.by_label
                .entry(s.label.clone())
                .or_default()
                .push(run.seq.slice(s.start, s.end)?);
        }
    }
    Ok(out)
}

/// Emission regime of one feature: a piecewise-linear mean trajectory
/// (keypoints evenly spread over the segment, relative to the scenario
/// baseline) plus independent Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRegime {
    /// `K x D` keypoints.
    pub trajectory: Vec<Vec<f64>>,
    /// Per-channel noise standard deviation; falls back to the scenario's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<Vec<f64>>,
    /// Inclusive `[min, max]` duration in frames.
    pub duration: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGrammar {
    pub start: Vec<(String, f64)>,
    pub edges: Vec<GrammarEdge>,
    pub end: Vec<String>,
}

/// Synthetic data recipe standing in for recorded robot runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub channels: Vec<String>,
    pub baseline: Vec<f64>,
    pub noise_sigma: Vec<f64>,
    pub frame_period: f64,
    pub features: BTreeMap<String, FeatureRegime>,
    pub grammar: ScenarioGrammar,
    /// Inclusive `[min, max]` number of feature segments; the walk goes on
    /// past the drawn count until it stands on an END node.
    pub run_length: [usize; 2],
    /// Channels kept in the emitted runs (all when absent).
    #[serde(default, skip_serializing_if = "Option::is_none", alias = "dropout_mask")]
    pub active_channels: Option<Vec<usize>>,
}

impl Scenario {
    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    pub fn effective_dim(&self) -> usize {
        self.active_channels.as_ref().map_or(self.dim(), Vec::len)
    }

    /// Grammar over the scenario's features; node model references are the
    /// feature names.
    pub fn to_grammar(&self) -> Grammar {
        Grammar {
            nodes: self
                .features
                .keys()
                .map(|name| GrammarNode {
                    name: name.clone(),
                    model: name.clone(),
                    exit: None,
                })
                .collect(),
            edges: self.grammar.edges.clone(),
            start: self.grammar.start.clone(),
            end: self.grammar.end.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let bad = |m: String| Error::Config(format!("scenario `{}`: {m}", self.name));
        if d == 0 {
            return Err(bad("no channels".into()));
        }
        if self.baseline.len() != d || self.noise_sigma.len() != d {
            return Err(bad("baseline and noise_sigma need one value per channel".into()));
        }
        if self.noise_sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(bad("noise_sigma must be finite and >= 0".into()));
        }
        for (name, f) in &self.features {
            if f.trajectory.is_empty() || f.trajectory.iter().any(|k| k.len() != d) {
                return Err(bad(format!("feature `{name}` trajectory must be K x {d}")));
            }
            if let Some(s) = &f.noise_sigma {
                if s.len() != d || s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(bad(format!("feature `{name}` noise_sigma must have {d} values >= 0")));
                }
            }
            if f.duration[0] == 0 || f.duration[0] > f.duration[1] {
                return Err(bad(format!("feature `{name}` duration range is empty")));
            }
        }
        if self.run_length[0] == 0 || self.run_length[0] > self.run_length[1] {
            return Err(bad("run_length range is empty".into()));
        }
        if let Some(active) = &self.active_channels {
            if active.is_empty() || active.iter().any(|&c| c >= d) {
                return Err(bad("active_channels must be a nonempty subset of channels".into()));
            }
        }
        if !(self.frame_period.is_finite() && self.frame_period > 0.0) {
            return Err(bad("frame_period must be > 0".into()));
        }
        self.to_grammar().validate()
    }

    /// Same scenario restricted to a channel subset.
    pub fn with_active_channels(&self, channels: Option<Vec<usize>>) -> Self {
        Self {
            active_channels: channels,
            ..self.clone()
        }
    }
}

fn pick<'a, R: Rng>(rng: &mut R, items: impl Iterator<Item = (&'a str, f64)> + Clone) -> &'a str {
    let total: f64 = items.clone().map(|(_, p)| p).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (name, p) in items {
        if p <= 0.0 {
            continue;
        }
        if u < p {
            return name;
        }
        u -= p;
        last = Some(name);
    }
    last.expect("at least one positive weight")
}

/// Generate one labeled run. Deterministic in `(scenario, seed)`.
pub fn synthesize_run(scenario: &Scenario, seed: u64) -> Result<LabeledRun> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grammar = &scenario.grammar;
    let target = rng.random_range(scenario.run_length[0]..=scenario.run_length[1]);
    let cap = 10 * target + 100;

    let mut labels: Vec<String> = Vec::new();
    let mut current = pick(&mut rng, grammar.start.iter().map(|(s, p)| (s.as_str(), *p))).to_string();
    loop {
        labels.push(current.clone());
        let is_end = grammar.end.contains(&current);
        if (labels.len() >= target && is_end) || labels.len() >= cap {
            break;
        }
        let out = grammar.edges.iter().filter(|e| e.from == current);
        if out.clone().next().is_none() {
            break;
        }
        current = pick(&mut rng, out.map(|e| (e.to.as_str(), e.probability))).to_string();
    }

    let d = scenario.dim();
    let mut frames: Vec<Vec<f64>> = Vec::new();
    let mut segments = Vec::with_capacity(labels.len());
    for label in labels {
        let regime = &scenario.features[&label];
        let len = rng.random_range(regime.duration[0]..=regime.duration[1]);
        let sigma = regime.noise_sigma.as_ref().unwrap_or(&scenario.noise_sigma);
        let k = regime.trajectory.len();
        let start = frames.len();
        for t in 0..len {
            let pos = if len > 1 && k > 1 {
                t as f64 / (len - 1) as f64 * (k - 1) as f64
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(k - 1);
            let hi = (lo + 1).min(k - 1);
            let w = pos - lo as f64;
            let frame = (0..d)
                .map(|c| {
                    let mean = scenario.baseline[c]
                        + (1.0 - w) * regime.trajectory[lo][c]
                        + w * regime.trajectory[hi][c];
                    let z: f64 = rng.sample(StandardNormal);
                    mean + sigma[c] * z
                })
                .collect();
            frames.push(frame);
        }
        segments.push(Segment::new(label, start, frames.len()));
    }

    let mut seq = ObservationSequence::new(frames, scenario.frame_period, scenario.channels.clone())?;
    if let Some(active) = &scenario.active_channels {
        seq = seq.select_channels(active)?;
    }
    let run = LabeledRun {
        run_id: format!("{}-{seed:06}", scenario.name),
        seq,
        segments,
        provenance: Provenance::Synthetic,
        scenario_seed: Some(seed),
    };
    run.validate()?;
    Ok(run)
}

pub mod presets {
    //! Built-in scenarios.

    use super::*;

    pub const OUTDOOR_CHANNELS: [&str; 8] = [
        "roll", "pitch", "wheel_lf", "wheel_lm", "wheel_lr", "wheel_rf", "wheel_rm", "wheel_rr",
    ];
    /// Roll and pitch.
    pub const ATTITUDE_CHANNELS: [usize; 2] = [0, 1];
    /// The six wheel currents.
    pub const WHEEL_CHANNELS: [usize; 6] = [2, 3, 4, 5, 6, 7];

    // keypoint rows: roll, pitch, lf, lm, lr, rf, rm, rr
    fn rock(scale: f64, left: bool) -> Vec<Vec<f64>> {
        let side = if left { 1.0 } else { -1.0 };
        let wheels = |f: f64, m: f64, r: f64| {
            if left {
                [f, m, r, 0.0, 0.0, 0.0]
            } else {
                [0.0, 0.0, 0.0, f, m, r]
            }
        };
        let rows: [(f64, f64, [f64; 6]); 7] = [
            (0.0, 0.0, wheels(0.0, 0.0, 0.0)),
            (3.0 * side, 8.0, wheels(8.0, 0.0, 0.0)),
            (6.0 * side, 16.0, wheels(0.0, 8.0, 0.0)),
            (0.0, 0.0, wheels(0.0, 0.0, 8.0)),
            (0.0, 8.0, wheels(0.0, 0.0, 0.0)),
            (0.0, 16.0, wheels(0.0, 0.0, 0.0)),
            (0.0, 0.0, wheels(0.0, 0.0, 0.0)),
        ];
        rows.iter()
            .map(|(roll, pitch, w)| {
                let mut v = vec![roll * scale, pitch * scale];
                v.extend(w.iter().map(|x| x * scale));
                v
            })
            .collect()
    }

    fn hill(scale: f64) -> Vec<Vec<f64>> {
        let rows: [(f64, f64); 7] = [
            (0.0, 0.0),
            (8.0, 4.0),
            (16.0, 8.0),
            (0.0, 12.0),
            (8.0, 8.0),
            (16.0, 4.0),
            (0.0, 0.0),
        ];
        rows.iter()
            .map(|(pitch, wheel)| {
                let mut v = vec![0.0, pitch * scale];
                v.extend(std::iter::repeat_n(wheel * scale, 6));
                v
            })
            .collect()
    }

    /// Six-situation outdoor scenario: level ground alternating with small
    /// or big rocks on either side and small or big hills.
    pub fn outdoor() -> Scenario {
        let d = OUTDOOR_CHANNELS.len();
        let situation = |trajectory| FeatureRegime {
            trajectory,
            noise_sigma: None,
            duration: [18, 30],
        };
        let mut features = BTreeMap::new();
        features.insert(
            "default".to_string(),
            FeatureRegime {
                trajectory: vec![vec![0.0; d]],
                noise_sigma: None,
                duration: [10, 25],
            },
        );
        features.insert("SL".to_string(), situation(rock(1.0, true)));
        features.insert("BL".to_string(), situation(rock(2.0, true)));
        features.insert("SR".to_string(), situation(rock(1.0, false)));
        features.insert("SH".to_string(), situation(hill(1.0)));
        features.insert("BH".to_string(), situation(hill(2.0)));
        let situations = ["BL", "SL", "SR", "BH", "SH"];
        let mut edges: Vec<GrammarEdge> = situations
            .iter()
            .map(|s| GrammarEdge {
                from: "default".into(),
                to: (*s).into(),
                probability: 1.0 / situations.len() as f64,
            })
            .collect();
        edges.extend(situations.iter().map(|s| GrammarEdge {
            from: (*s).into(),
            to: "default".into(),
            probability: 1.0,
        }));
        Scenario {
            name: "outdoor".into(),
            channels: OUTDOOR_CHANNELS.iter().map(|s| s.to_string()).collect(),
            baseline: vec![0.0, 0.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0],
            noise_sigma: vec![1.0; d],
            frame_period: 0.1,
            features,
            grammar: ScenarioGrammar {
                start: vec![("default".into(), 1.0)],
                edges,
                end: vec!["default".into()],
            },
            run_length: [5, 9],
            active_channels: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: Vec<Vec<f64>>) -> ObservationSequence {
        ObservationSequence::from_frames(frames).unwrap()
    }

    #[test]
    fn derivative_of_constant_and_ramp() {
        let c = first_derivative(&seq(vec![vec![3.0, -1.0]; 10])).unwrap();
        assert_eq!(c.len(), 9);
        assert!(c.frames().iter().all(|f| f == &vec![0.0, 0.0]));
        let ramp = first_derivative(&seq((0..10).map(|t| vec![2.5 * t as f64]).collect())).unwrap();
        assert!(ramp.frames().iter().all(|f| f[0] == 2.5));
        assert_eq!(ramp.channel_names, vec!["ch0_delta"]);
        assert!(first_derivative(&seq(vec![vec![1.0]])).is_err());
    }

    #[test]
    fn step_signal_segmentation() {
        let frames = (0..80).map(|t| vec![if (20..50).contains(&t) { 120.0 } else { 30.0 }]).collect();
        let rule = SegmentationRule {
            label: "door".into(),
            channels: vec![0],
            rise: 50.0,
            fall: 50.0,
            min_duration: 5,
        };
        let out = segment_run("r", &seq(frames), &[rule], "corridor").unwrap();
        assert_eq!(
            out.run.segments,
            vec![
                Segment::new("corridor", 0, 20),
                Segment::new("door", 20, 50),
                Segment::new("corridor", 50, 80)
            ]
        );
    }

    #[test]
    fn flat_and_spike_signals_stay_default() {
        let rule = SegmentationRule {
            label: "door".into(),
            channels: vec![0],
            rise: 50.0,
            fall: 50.0,
            min_duration: 5,
        };
        let flat = segment_run("r", &seq(vec![vec![30.0]; 40]), std::slice::from_ref(&rule), "corridor").unwrap();
        assert_eq!(flat.run.segments, vec![Segment::new("corridor", 0, 40)]);
        let spike = (0..40).map(|t| vec![if (10..12).contains(&t) { 120.0 } else { 30.0 }]).collect();
        let out = segment_run("r", &seq(spike), std::slice::from_ref(&rule), "corridor").unwrap();
        assert_eq!(out.run.segments, vec![Segment::new("corridor", 0, 40)]);
        assert_eq!(out.short_segments, 1);
        let unclosed = (0..40).map(|t| vec![if t >= 30 { 120.0 } else { 30.0 }]).collect();
        let out = segment_run("r", &seq(unclosed), &[rule], "corridor").unwrap();
        assert_eq!(out.discarded_onsets, 1);
        assert_eq!(out.run.segments.len(), 1);
    }

    #[test]
    fn label_beyond_run_rejected() {
        let run = LabeledRun {
            run_id: "run-7".into(),
            seq: seq(vec![vec![0.0]; 5]),
            segments: vec![Segment::new("a", 0, 6)],
            provenance: Provenance::Recorded,
            scenario_seed: None,
        };
        let err = run.validate().unwrap_err();
        assert!(err.to_string().contains("run-7"), "{err}");
    }

    #[test]
    fn overlapping_segments_rejected() {
        let err = check_segments(&[Segment::new("a", 0, 4), Segment::new("b", 3, 6)], 6).unwrap_err();
        assert!(err.contains("overlaps"));
    }

    #[test]
    fn csv_parse_and_errors() {
        let s = parse_frames_csv("a,b,c\n1,2,3\n4,5,6\n7,8,9\n1,1,1\n0.5,-2,1e3\n", "r").unwrap();
        assert_eq!((s.len(), s.dim()), (5, 3));
        assert_eq!(s.frame(4), &[0.5, -2.0, 1000.0]);
        let err = parse_frames_csv("a,b\n1,2\n3\n", "r").unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
        let err = parse_frames_csv("a,b\n1,x\n", "r").unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn corpora_grouping_and_exclusion() {
        let mk = |id: &str, segs: Vec<Segment>| LabeledRun {
            run_id: id.into(),
            seq: seq(vec![vec![0.0]; 20]),
            segments: segs,
            provenance: Provenance::Recorded,
            scenario_seed: None,
        };
        let runs = vec![
            mk("a", vec![Segment::new("c", 0, 8), Segment::new("doorL", 8, 14), Segment::new("c", 14, 20)]),
            mk("b", vec![Segment::new("c", 0, 10), Segment::new("doorL", 10, 18), Segment::new("x", 18, 20)]),
        ];
        let c = build_corpora(&runs).unwrap();
        assert_eq!(c.by_label["doorL"].len(), 2);
        assert_eq!(c.excluded, 1);
        assert!(!c.by_label.contains_key("x"));
        assert!(!c.by_label.contains_key("doorR"));
    }

    #[test]
    fn derivative_segment_mapping_round_trips() {
        let segs = vec![Segment::new("a", 0, 10), Segment::new("b", 10, 25), Segment::new("a", 25, 40)];
        let d = derivative_segments(&segs);
        assert_eq!(d, vec![Segment::new("a", 0, 9), Segment::new("b", 9, 24), Segment::new("a", 24, 39)]);
        assert_eq!(restore_segments(&d), segs);
    }

    #[test]
    fn synthesis_is_deterministic_and_consistent() {
        let sc = presets::outdoor();
        let a = synthesize_run(&sc, 11).unwrap();
        let b = synthesize_run(&sc, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.seq, synthesize_run(&sc, 12).unwrap().seq);
        assert_eq!(a.seq.dim(), 8);
        let two = synthesize_run(&sc.with_active_channels(Some(presets::ATTITUDE_CHANNELS.to_vec())), 11).unwrap();
        assert_eq!(two.seq.dim(), 2);
        assert_eq!(two.seq.channel_names, vec!["roll", "pitch"]);
    }

    #[test]
    fn forced_sequence_scenario() {
        let mut sc = presets::outdoor();
        sc.grammar = ScenarioGrammar {
            start: vec![("default".into(), 1.0)],
            edges: vec![
                GrammarEdge { from: "default".into(), to: "SL".into(), probability: 1.0 },
                GrammarEdge { from: "SL".into(), to: "default".into(), probability: 1.0 },
            ],
            end: vec!["default".into()],
        };
        sc.features.retain(|k, _| k == "default" || k == "SL");
        sc.run_length = [3, 3];
        let run = synthesize_run(&sc, 3).unwrap();
        let labels: Vec<&str> = run.segments.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, vec!["default", "SL", "default"]);
    }
}
