//! Command-line pipeline: simulate, segment, train, recognize, evaluate and
//! inspect. Settings come from flags, then an optional JSON config file,
//! then built-in defaults.

pub mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    self, build_corpora, derivative_run, first_derivative, load_runs, read_frames_csv, restore_segments,
    save_runs, segment_run, synthesize_run, LabelRecord, LabeledRun, Scenario, SegmentationRule,
};
use crate::error::{Error, Result};
use crate::evaluation::{align, report, DEFAULT_OVERLAP_THRESHOLD};
use crate::grammar::{compose, decode_run, feature_label, parse_grammar, FeatureSequence, Segment};
use crate::model::{load_model, save_model, CovarianceMode, Hmm2Model, ObservationSequence};
use crate::training::{initialize_from_segments, train, LeftRightShape, OrderMode, TrainingConfig, TrainingReport};
use io::{read_json, read_text, to_json_pretty, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_JSON_FILE: &str = "report.json";

/// Settings shared by all commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scenario: Option<PathBuf>,
    pub runs: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub grammar: Option<PathBuf>,
    pub hypotheses: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub count: Option<usize>,
    pub num_states: usize,
    pub num_mixtures: usize,
    pub covariance_mode: CovarianceMode,
    /// Train and decode on frame-to-frame differences instead of raw frames.
    pub derivative: bool,
    pub sensors: Option<Vec<usize>>,
    pub features: Vec<String>,
    pub default_label: String,
    pub overlap_threshold: f64,
    pub training: TrainingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            runs: None,
            labels: None,
            models: None,
            grammar: None,
            hypotheses: None,
            rules: None,
            out: None,
            seed: None,
            count: None,
            num_states: 5,
            num_mixtures: 1,
            covariance_mode: CovarianceMode::Diagonal,
            derivative: true,
            sensors: None,
            features: Vec::new(),
            default_label: "default".into(),
            overlap_threshold: DEFAULT_OVERLAP_THRESHOLD,
            training: TrainingConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.num_states < 2 {
            return Err(Error::Config("num_states must be >= 2".into()));
        }
        if self.num_mixtures == 0 {
            return Err(Error::Config("num_mixtures must be >= 1".into()));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err(Error::Config("overlap_threshold must lie in (0, 1]".into()));
        }
        if matches!(&self.sensors, Some(s) if s.is_empty()) {
            return Err(Error::Config("sensor list is empty".into()));
        }
        Ok(())
    }

    fn need<'a>(&'a self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("missing --{flag} (or `{flag}` in the config file)")))
    }
}

#[derive(Debug, Parser)]
#[command(name = "hmm2kit", version, about = "Second-order HMM feature recognition toolkit")]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labeled synthetic runs from a scenario.
    Simulate(SimulateArgs),
    /// Label runs with threshold rules.
    Segment(SegmentArgs),
    /// Train one left-right model per feature.
    Train(TrainArgs),
    /// Decode runs into feature sequences under a grammar.
    Recognize(RecognizeArgs),
    /// Score hypotheses against reference labels.
    Evaluate(EvaluateArgs),
    /// Print defaults or summarize a model, grammar or scenario.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub sensors: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// JSON list of segmentation rules.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long)]
    pub default_label: Option<String>,
    /// Labels file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Feature to train; repeat for several, omit for all labels.
    #[arg(long = "feature")]
    pub features: Vec<String>,
    #[arg(long)]
    pub states: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub order: Option<u8>,
    #[arg(long, value_delimiter = ',')]
    pub sensors: Option<Vec<usize>>,
    #[arg(long)]
    pub raw: bool,
    /// Output directory for model files.
    #[arg(long)]
    pub models: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecognizeArgs {
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub sensors: Option<Vec<usize>>,
    #[arg(long)]
    pub raw: bool,
    /// Hypothesis JSONL to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub hypotheses: Option<PathBuf>,
    #[arg(long)]
    pub default_label: Option<String>,
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Directory for report.txt and report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub defaults: bool,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    /// Print the built-in outdoor scenario document.
    #[arg(long)]
    pub scenario_template: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationManifest {
    pub scenario: String,
    pub seed: u64,
    pub count: usize,
    pub run_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDocument {
    pub feature: String,
    pub num_states: usize,
    pub num_sequences: usize,
    pub skipped_short: usize,
    pub ll_trace: Vec<f64>,
    pub report: TrainingReport,
}

/// One line of the hypothesis file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<Segment>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_joint: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Parse arguments and run; clap usage errors map to configuration errors.
pub fn run_from<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(cli)
}

/// Run a parsed command. Returns what the command prints to stdout.
pub fn run(cli: Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(path) => read_json::<PipelineConfig>(path).map_err(|e| match e {
            Error::Malformed(m) => Error::Config(m),
            other => other,
        })?,
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value {
                cfg.$field = Some(v);
            }
        };
    }
    match cli.command {
        Command::Simulate(a) => {
            set!(scenario, a.scenario);
            set!(count, a.count);
            set!(seed, a.seed);
            set!(sensors, a.sensors);
            set!(out, a.out);
            cfg.validate()?;
            cmd_simulate(&cfg)
        }
        Command::Segment(a) => {
            set!(runs, a.runs);
            set!(rules, a.rules);
            set!(out, a.out);
            if let Some(l) = a.default_label {
                cfg.default_label = l;
            }
            cfg.validate()?;
            cmd_segment(&cfg)
        }
        Command::Train(a) => {
            set!(runs, a.runs);
            set!(labels, a.labels);
            set!(sensors, a.sensors);
            set!(models, a.models);
            if !a.features.is_empty() {
                cfg.features = a.features;
            }
            if let Some(n) = a.states {
                cfg.num_states = n;
            }
            if let Some(o) = a.order {
                cfg.training.order_mode = if o == 1 { OrderMode::FirstOrder } else { OrderMode::SecondOrder };
            }
            if a.raw {
                cfg.derivative = false;
            }
            cfg.validate()?;
            cmd_train(&cfg)
        }
        Command::Recognize(a) => {
            set!(models, a.models);
            set!(grammar, a.grammar);
            set!(runs, a.runs);
            set!(sensors, a.sensors);
            set!(out, a.out);
            if a.raw {
                cfg.derivative = false;
            }
            cfg.validate()?;
            cmd_recognize(&cfg)
        }
        Command::Evaluate(a) => {
            set!(labels, a.labels);
            set!(hypotheses, a.hypotheses);
            set!(out, a.out);
            if let Some(l) = a.default_label {
                cfg.default_label = l;
            }
            if let Some(o) = a.overlap {
                cfg.overlap_threshold = o;
            }
            cfg.validate()?;
            cmd_evaluate(&cfg)
        }
        Command::Inspect(a) => cmd_inspect(&cfg, &a),
    }
}

pub fn cmd_simulate(cfg: &PipelineConfig) -> Result<String> {
    let scenario_path = cfg.need(&cfg.scenario, "scenario")?;
    let out = cfg.need(&cfg.out, "out")?;
    let seed = cfg.seed.ok_or_else(|| Error::Config("simulate needs --seed".into()))?;
    let count = cfg.count.ok_or_else(|| Error::Config("simulate needs --count".into()))?;
    let mut scenario: Scenario = read_json(scenario_path).map_err(|e| match e {
        Error::Malformed(m) => Error::Config(m),
        other => other,
    })?;
    if cfg.sensors.is_some() {
        scenario = scenario.with_active_channels(cfg.sensors.clone());
    }
    scenario.validate()?;
    let runs = (0..count as u64)
        .into_par_iter()
        .map(|i| synthesize_run(&scenario, seed + i))
        .collect::<Result<Vec<_>>>()?;
    save_runs(&runs, out)?;
    let manifest = SimulationManifest {
        scenario: scenario.name.clone(),
        seed,
        count,
        run_ids: runs.iter().map(|r| r.run_id.clone()).collect(),
    };
    write_atomic(&out.join(MANIFEST_FILE), to_json_pretty(&manifest).as_bytes())?;
    Ok(format!("wrote {count} runs to {}\n", out.display()))
}

/// Run ids of a runs directory: the manifest when present, else every CSV.
pub fn list_run_ids(dir: &Path) -> Result<Vec<String>> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() {
        return Ok(read_json::<SimulationManifest>(&manifest)?.run_ids);
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "csv") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn cmd_segment(cfg: &PipelineConfig) -> Result<String> {
    let runs_dir = cfg.need(&cfg.runs, "runs")?;
    let rules: Vec<SegmentationRule> = read_json(cfg.need(&cfg.rules, "rules")?)?;
    let out = cfg.need(&cfg.out, "out")?;
    let mut records = Vec::new();
    let mut discarded = 0;
    for id in list_run_ids(runs_dir)? {
        let seq = read_frames_csv(&runs_dir.join(format!("{id}.csv")), &id)?;
        let outcome = segment_run(&id, &seq, &rules, &cfg.default_label)?;
        discarded += outcome.discarded_onsets;
        records.push(LabelRecord {
            run_id: id,
            segments: outcome.run.segments,
            provenance: corpus::Provenance::Recorded,
            scenario_seed: None,
        });
    }
    write_atomic(out, corpus::labels_to_jsonl(&records).as_bytes())?;
    Ok(format!(
        "labeled {} runs ({discarded} unclosed onsets discarded)\n",
        records.len()
    ))
}

fn prepare_run(run: &LabeledRun, cfg: &PipelineConfig) -> Result<LabeledRun> {
    let mut run = run.clone();
    if let Some(s) = &cfg.sensors {
        run.seq = run.seq.select_channels(s)?;
    }
    if cfg.derivative {
        run = derivative_run(&run)?;
    }
    Ok(run)
}

fn prepare_seq(seq: &ObservationSequence, cfg: &PipelineConfig) -> Result<ObservationSequence> {
    let seq = match &cfg.sensors {
        Some(s) => seq.select_channels(s)?,
        None => seq.clone(),
    };
    if cfg.derivative {
        first_derivative(&seq)
    } else {
        Ok(seq)
    }
}

/// Train one model per requested feature from already prepared runs.
pub fn train_feature_models(
    runs: &[LabeledRun],
    cfg: &PipelineConfig,
) -> Result<BTreeMap<String, (Hmm2Model, TrainDocument)>> {
    let corpora = build_corpora(runs)?;
    if corpora.excluded > 0 {
        log::warn!("{} segments shorter than 3 frames excluded", corpora.excluded);
    }
    let features: Vec<String> = if cfg.features.is_empty() {
        corpora.by_label.keys().cloned().collect()
    } else {
        cfg.features.clone()
    };
    let shape = LeftRightShape {
        num_states: cfg.num_states,
        num_mixtures: cfg.num_mixtures,
        covariance_mode: cfg.covariance_mode,
    };
    let mut out = BTreeMap::new();
    for feature in features {
        let all = corpora.by_label.get(&feature).map(Vec::as_slice).unwrap_or(&[]);
        let usable: Vec<ObservationSequence> =
            all.iter().filter(|s| s.len() >= cfg.num_states.max(3)).cloned().collect();
        let skipped_short = all.len() - usable.len();
        if usable.is_empty() {
            return Err(Error::invalid(format!(
                "no training segments of at least {} frames for feature `{feature}`",
                cfg.num_states.max(3)
            )));
        }
        let init = initialize_from_segments(shape, &usable, cfg.training.variance_floor)?;
        let outcome = train(&init, &usable, &cfg.training)?;
        log::info!(
            "{feature}: {} sequences, {} iterations, final log-likelihood {}",
            usable.len(),
            outcome.ll_trace.len(),
            outcome.ll_trace.last().copied().unwrap_or(f64::NAN)
        );
        let doc = TrainDocument {
            feature: feature.clone(),
            num_states: cfg.num_states,
            num_sequences: usable.len(),
            skipped_short,
            ll_trace: outcome.ll_trace,
            report: outcome.report,
        };
        out.insert(feature, (outcome.model, doc));
    }
    Ok(out)
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<String> {
    let runs_dir = cfg.need(&cfg.runs, "runs")?;
    let labels = cfg.need(&cfg.labels, "labels")?;
    let models_dir = cfg.need(&cfg.models, "models")?;
    let runs = load_runs(runs_dir, labels)?
        .iter()
        .map(|r| prepare_run(r, cfg))
        .collect::<Result<Vec<_>>>()?;
    let trained = train_feature_models(&runs, cfg)?;
    for (feature, (model, doc)) in &trained {
        save_model(model, &models_dir.join(format!("{feature}.json")))?;
        write_atomic(
            &models_dir.join(format!("{feature}.report.json")),
            to_json_pretty(doc).as_bytes(),
        )?;
    }
    Ok(format!("trained {} models into {}\n", trained.len(), models_dir.display()))
}

/// Decode one raw run and map segments back onto its frames.
pub fn recognize_run(
    composite: &crate::grammar::CompositeModel,
    seq: &ObservationSequence,
    cfg: &PipelineConfig,
) -> Result<FeatureSequence> {
    let decoded = decode_run(composite, &prepare_seq(seq, cfg)?)?;
    Ok(if cfg.derivative {
        FeatureSequence {
            segments: restore_segments(&decoded.segments),
            log_joint: decoded.log_joint,
        }
    } else {
        decoded
    })
}

pub fn cmd_recognize(cfg: &PipelineConfig) -> Result<String> {
    let models_dir = cfg.need(&cfg.models, "models")?;
    let grammar_path = cfg.need(&cfg.grammar, "grammar")?;
    let runs_dir = cfg.need(&cfg.runs, "runs")?;
    let out = cfg.need(&cfg.out, "out")?;
    let grammar = parse_grammar(&read_text(grammar_path)?)?;
    let mut models = BTreeMap::new();
    for node in &grammar.nodes {
        let path = models_dir.join(format!("{}.json", feature_label(&node.model)));
        if !path.exists() {
            return Err(Error::UnknownReference(format!(
                "model `{}` of node `{}` ({})",
                node.model,
                node.name,
                path.display()
            )));
        }
        models.insert(node.name.clone(), load_model(&path)?);
    }
    let composite = compose(&grammar, &models)?;
    let ids = list_run_ids(runs_dir)?;
    let records: Vec<HypothesisRecord> = ids
        .par_iter()
        .map(|id| {
            let result = read_frames_csv(&runs_dir.join(format!("{id}.csv")), id)
                .and_then(|seq| recognize_run(&composite, &seq, cfg));
            match result {
                Ok(fs) => HypothesisRecord {
                    run_id: id.clone(),
                    segments: Some(fs.segments),
                    log_joint: Some(fs.log_joint),
                    error: None,
                },
                Err(e) => HypothesisRecord {
                    run_id: id.clone(),
                    segments: None,
                    log_joint: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_atomic(out, text.as_bytes())?;
    let failed: Vec<&str> = records
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.run_id.as_str())
        .collect();
    if !failed.is_empty() {
        log::error!("decoding failed for: {}", failed.join(", "));
        return Err(Error::DecodeFailure);
    }
    Ok(format!("decoded {} runs\n", records.len()))
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<HypothesisRecord>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Malformed(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<String> {
    let labels = corpus::read_labels(cfg.need(&cfg.labels, "labels")?)?;
    let hyps = read_hypotheses(cfg.need(&cfg.hypotheses, "hypotheses")?)?;
    let out = cfg.need(&cfg.out, "out")?;
    let by_id: BTreeMap<&str, &HypothesisRecord> = hyps.iter().map(|h| (h.run_id.as_str(), h)).collect();
    let missing: Vec<&str> = labels
        .iter()
        .map(|l| l.run_id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let known: BTreeSet<&str> = labels.iter().map(|l| l.run_id.as_str()).collect();
    let extra: Vec<&str> = hyps.iter().map(|h| h.run_id.as_str()).filter(|id| !known.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::invalid(format!(
            "run ids differ; missing hypotheses: [{}], unknown hypotheses: [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    let mut alignments = Vec::with_capacity(labels.len());
    for l in &labels {
        let reference = FeatureSequence {
            segments: l.segments.clone(),
            log_joint: 0.0,
        };
        let h = by_id[l.run_id.as_str()];
        let hypothesis = match &h.segments {
            Some(segments) => FeatureSequence {
                segments: segments.clone(),
                log_joint: h.log_joint.unwrap_or(0.0),
            },
            None => {
                // a failed decode recognizes nothing
                log::warn!("{}: no hypothesis, scoring as all-default", l.run_id);
                let end = l.segments.last().map_or(0, |s| s.end);
                FeatureSequence {
                    segments: vec![Segment::new(cfg.default_label.clone(), 0, end)],
                    log_joint: 0.0,
                }
            }
        };
        alignments.push(
            align(&reference, &hypothesis, &cfg.default_label, cfg.overlap_threshold).map_err(|e| {
                Error::RunValidation {
                    run: l.run_id.clone(),
                    message: e.to_string(),
                }
            })?,
        );
    }
    let rep = report(&alignments)?;
    let text = rep.to_text();
    write_atomic(&out.join(REPORT_TEXT_FILE), text.as_bytes())?;
    write_atomic(&out.join(REPORT_JSON_FILE), rep.to_json().as_bytes())?;
    Ok(text)
}

pub fn cmd_inspect(cfg: &PipelineConfig, args: &InspectArgs) -> Result<String> {
    let mut out = String::new();
    if args.defaults {
        out.push_str(&to_json_pretty(&PipelineConfig::default()));
    }
    if args.scenario_template {
        out.push_str(&to_json_pretty(&corpus::presets::outdoor()));
    }
    if let Some(path) = &args.model {
        let m = load_model(path)?;
        let n = m.num_states();
        out.push_str(&format!(
            "states {n}, channels {}, final {:?}\n",
            m.obs_dim(),
            m.final_states()
        ));
        for s in 0..n {
            let stay = m.transition(s, s, s);
            let mean_dur = if stay < 1.0 { 1.0 / (1.0 - stay) } else { f64::INFINITY };
            out.push_str(&format!(
                "state {s}: a_sss {stay:.4}, mean stay {mean_dur:.2} frames, {} components\n",
                m.emissions()[s].len()
            ));
        }
    }
    if let Some(path) = &args.grammar {
        out.push_str(&parse_grammar(&read_text(path)?)?.to_text());
    }
    if out.is_empty() {
        out.push_str(&to_json_pretty(cfg));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = PipelineConfig::default();
        let back: PipelineConfig = serde_json::from_str(&to_json_pretty(&cfg)).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.num_states, 5);
    }

    #[test]
    fn flag_overrides_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("cfg.json");
        std::fs::write(&cfg_path, r#"{"num_states": 7, "seed": 3}"#).unwrap();
        let cli = Cli::try_parse_from([
            "hmm2kit",
            "--config",
            cfg_path.to_str().unwrap(),
            "train",
            "--states",
            "4",
        ])
        .unwrap();
        // missing paths surface as a configuration error, after merging
        let err = run(cli).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn unknown_config_key_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("cfg.json");
        std::fs::write(&cfg_path, r#"{"nope": 1}"#).unwrap();
        let err = run_from(["hmm2kit", "--config", cfg_path.to_str().unwrap(), "inspect"]).unwrap_err();
        assert_eq!(err.class().exit_code(), 2);
    }

    #[test]
    fn order_flag_is_range_checked() {
        assert!(run_from(["hmm2kit", "train", "--order", "3"]).is_err());
    }
}
