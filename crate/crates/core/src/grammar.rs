//! Grammars over feature models, their composition into one decodable
//! HMM2 and whole-run decoding into feature segments.
//!
//! Composition semantics: a grammar edge `A -> B` links the exit (final)
//! states of block `A` to the entry states of block `B`. Leaving a block is
//! first order: the cross-block probability from exit state `x` to entry
//! state `y` is `exit(A) * p(A -> B) * pi_B(y)` whatever state preceded
//! `x`, and the first step inside a block after entering it uses the
//! block's first-step matrix. Exit-state rows inside a block with outgoing
//! edges are scaled by `1 - exit(A)`; every other within-block entry is
//! copied unchanged.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::viterbi_decode;
use crate::model::{Hmm2Model, Hmm2Parts, ObservationSequence, STOCHASTIC_TOL};
use crate::training::{accumulate_corpus_inner, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarNode {
    pub name: String,
    /// Model reference, usually a model file path.
    pub model: String,
    /// Probability of leaving the block once in an exit state. `None` uses
    /// the model-derived default, see [`default_exit_probability`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarEdge {
    pub from: String,
    pub to: String,
    pub probability: f64,
}

/// Legal feature orderings as a weighted graph over feature models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub nodes: Vec<GrammarNode>,
    pub edges: Vec<GrammarEdge>,
    pub start: Vec<(String, f64)>,
    pub end: Vec<String>,
}

impl Grammar {
    pub fn node(&self, name: &str) -> Option<&GrammarNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn outgoing<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a GrammarEdge> + 'a {
        self.edges.iter().filter(move |e| e.from == name)
    }

    /// Structural and normalization checks.
    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for node in &self.nodes {
            if !names.insert(node.name.as_str()) {
                return Err(Error::Grammar(format!("node `{}` declared twice", node.name)));
            }
            if let Some(e) = node.exit {
                if !(e > 0.0 && e < 1.0) {
                    return Err(Error::Grammar(format!(
                        "exit probability {e} of `{}` outside (0, 1)",
                        node.name
                    )));
                }
            }
        }
        let resolve = |n: &str| {
            if names.contains(n) {
                Ok(())
            } else {
                Err(Error::UnknownReference(n.to_string()))
            }
        };
        for e in &self.edges {
            resolve(&e.from)?;
            resolve(&e.to)?;
            if !(e.probability.is_finite() && e.probability >= 0.0) {
                return Err(Error::Grammar(format!(
                    "edge {} -> {} has probability {}",
                    e.from, e.to, e.probability
                )));
            }
        }
        for (s, p) in &self.start {
            resolve(s)?;
            if !(p.is_finite() && *p >= 0.0) {
                return Err(Error::Grammar(format!("start `{s}` has probability {p}")));
            }
        }
        for e in &self.end {
            resolve(e)?;
        }
        if self.start.is_empty() {
            return Err(Error::Grammar("no START node".into()));
        }
        if self.end.is_empty() {
            return Err(Error::Grammar("no END node".into()));
        }
        let start_sum: f64 = self.start.iter().map(|(_, p)| p).sum();
        if (start_sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Normalization {
                what: "start probabilities".into(),
                sum: start_sum,
            });
        }
        for node in &self.nodes {
            let mut any = false;
            let mut sum = 0.0;
            for e in self.outgoing(&node.name) {
                any = true;
                sum += e.probability;
            }
            if any && (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Normalization {
                    what: format!("edges leaving `{}`", node.name),
                    sum,
                });
            }
            if !any && !self.end.contains(&node.name) {
                return Err(Error::Grammar(format!(
                    "node `{}` has no outgoing edge and is not an END node",
                    node.name
                )));
            }
        }
        // every END node must be reachable from some START node
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let mut queue: VecDeque<&str> = self
            .start
            .iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(s, _)| s.as_str())
            .collect();
        while let Some(n) = queue.pop_front() {
            if !seen.insert(n) {
                continue;
            }
            for e in self.outgoing(n).filter(|e| e.probability > 0.0) {
                queue.push_back(&e.to);
            }
        }
        if let Some(e) = self.end.iter().find(|e| !seen.contains(e.as_str())) {
            return Err(Error::Grammar(format!("END node `{e}` is unreachable")));
        }
        Ok(())
    }

    /// Render as a grammar document.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let _ = writeln!(out, "NODE {} {}", n.name, n.model);
        }
        for n in &self.nodes {
            if let Some(e) = n.exit {
                let _ = writeln!(out, "EXIT {} {}", n.name, e);
            }
        }
        for (s, p) in &self.start {
            let _ = writeln!(out, "START {s} {p}");
        }
        for e in &self.end {
            let _ = writeln!(out, "END {e}");
        }
        for e in &self.edges {
            let _ = writeln!(out, "EDGE {} {} {}", e.from, e.to, e.probability);
        }
        out
    }
}

/// Parse a grammar document:
///
/// ```text
/// # comment
/// NODE <name> <model-file>
/// START <name> [prob]
/// END <name>
/// EDGE <from> <to> [prob]
/// EXIT <name> <prob>
/// ```
///
/// Omitted probabilities share whatever mass the explicit ones leave, in
/// equal parts.
pub fn parse_grammar(text: &str) -> Result<Grammar> {
    let mut nodes: Vec<GrammarNode> = Vec::new();
    let mut edges: Vec<(String, String, Option<f64>)> = Vec::new();
    let mut starts: Vec<(String, Option<f64>)> = Vec::new();
    let mut end = Vec::new();
    let mut exits: Vec<(String, f64)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| Error::Malformed(format!("grammar line {}: {msg}: `{}`", lineno + 1, raw.trim()));
        let prob = |tok: &str| -> Result<f64> {
            tok.parse::<f64>().map_err(|_| bad("probability is not a number"))
        };
        match (toks[0], toks.len()) {
            ("NODE", 3) => nodes.push(GrammarNode {
                name: toks[1].to_string(),
                model: toks[2].to_string(),
                exit: None,
            }),
            ("START", 2) => starts.push((toks[1].to_string(), None)),
            ("START", 3) => starts.push((toks[1].to_string(), Some(prob(toks[2])?))),
            ("END", 2) => end.push(toks[1].to_string()),
            ("EDGE", 3) => edges.push((toks[1].to_string(), toks[2].to_string(), None)),
            ("EDGE", 4) => edges.push((toks[1].to_string(), toks[2].to_string(), Some(prob(toks[3])?))),
            ("EXIT", 3) => exits.push((toks[1].to_string(), prob(toks[2])?)),
            ("NODE" | "START" | "END" | "EDGE" | "EXIT", _) => return Err(bad("wrong number of fields")),
            _ => return Err(bad("unknown directive")),
        }
    }

    for (name, p) in exits {
        let node = nodes
            .iter_mut()
            .find(|n| n.name == name)
            .ok_or_else(|| Error::UnknownReference(name.clone()))?;
        node.exit = Some(p);
    }

    let start = fill_defaults(starts.into_iter().map(|(s, p)| ((s,), p)).collect(), "start probabilities")?
        .into_iter()
        .map(|((s,), p)| (s, p))
        .collect();

    // defaults are resolved per source node
    let mut by_source: BTreeMap<String, Vec<((String, String), Option<f64>)>> = BTreeMap::new();
    let mut order = Vec::new();
    for (from, to, p) in edges {
        order.push((from.clone(), to.clone()));
        by_source.entry(from.clone()).or_default().push(((from, to), p));
    }
    let mut resolved: BTreeMap<(String, String), f64> = BTreeMap::new();
    for (from, list) in by_source {
        for ((f, t), p) in fill_defaults(list, &format!("edges leaving `{from}`"))? {
            *resolved.entry((f, t)).or_insert(0.0) += p;
        }
    }
    let mut emitted = BTreeSet::new();
    let edges = order
        .into_iter()
        .filter(|k| emitted.insert(k.clone()))
        .map(|(from, to)| {
            let probability = resolved[&(from.clone(), to.clone())];
            GrammarEdge { from, to, probability }
        })
        .collect();

    let grammar = Grammar {
        nodes,
        edges,
        start,
        end,
    };
    grammar.validate()?;
    Ok(grammar)
}

fn fill_defaults<K>(items: Vec<(K, Option<f64>)>, what: &str) -> Result<Vec<(K, f64)>> {
    let explicit: f64 = items.iter().filter_map(|(_, p)| *p).sum();
    let missing = items.iter().filter(|(_, p)| p.is_none()).count();
    if missing == 0 {
        return Ok(items.into_iter().map(|(k, p)| (k, p.unwrap_or(0.0))).collect());
    }
    let remaining = 1.0 - explicit;
    if remaining < -STOCHASTIC_TOL {
        return Err(Error::Normalization {
            what: what.to_string(),
            sum: explicit,
        });
    }
    let share = remaining.max(0.0) / missing as f64;
    Ok(items.into_iter().map(|(k, p)| (k, p.unwrap_or(share))).collect())
}

/// Probability of leaving a block from an exit state when the grammar does
/// not set one: the leave rate of the state before the exit,
/// `1 - a_{s,s,s}` with `s = N - 2`, or `0.5` for single-state models.
pub fn default_exit_probability(model: &Hmm2Model) -> f64 {
    let n = model.num_states();
    if n < 2 {
        return 0.5;
    }
    let s = n - 2;
    let leave = 1.0 - model.transition(s, s, s);
    leave.clamp(1e-3, 1.0 - 1e-3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub exit_probability: f64,
}

/// One cross-block transition contributed by a grammar edge.
#[derive(Debug, Clone, PartialEq)]
struct CrossLink {
    edge: usize,
    from_state: usize,
    to_state: usize,
    probability: f64,
}

/// Block-structured merge of feature models under a grammar.
#[derive(Debug, Clone)]
pub struct CompositeModel {
    pub merged: Hmm2Model,
    /// Global state -> (feature label, local state index). The label is the
    /// file stem of the node's model reference.
    pub state_to_feature: Vec<(String, usize)>,
    pub blocks: Vec<Block>,
    grammar: Grammar,
    sources: BTreeMap<String, Hmm2Model>,
    links: Vec<CrossLink>,
}

impl CompositeModel {
    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn source_models(&self) -> &BTreeMap<String, Hmm2Model> {
        &self.sources
    }

    pub fn label_of(&self, state: usize) -> &str {
        &self.state_to_feature[state].0
    }
}

/// Feature label of a model reference: `models/doorL.json` -> `doorL`.
pub fn feature_label(model_ref: &str) -> &str {
    std::path::Path::new(model_ref)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(model_ref)
}

/// Merge `models` (keyed by grammar node name) into one HMM2.
pub fn compose(grammar: &Grammar, models: &BTreeMap<String, Hmm2Model>) -> Result<CompositeModel> {
    grammar.validate()?;
    let mut blocks = Vec::with_capacity(grammar.nodes.len());
    let mut offset = 0;
    let mut obs_dim = None;
    for node in &grammar.nodes {
        let model = models
            .get(&node.name)
            .ok_or_else(|| Error::UnknownReference(node.name.clone()))?;
        match obs_dim {
            None => obs_dim = Some(model.obs_dim()),
            Some(d) if d != model.obs_dim() => {
                return Err(Error::invalid(format!(
                    "model `{}` has {} channels, others have {d}",
                    node.name,
                    model.obs_dim()
                )))
            }
            Some(_) => {}
        }
        let has_out = grammar.outgoing(&node.name).any(|e| e.probability > 0.0);
        let exit_probability = if has_out {
            node.exit.unwrap_or_else(|| default_exit_probability(model))
        } else {
            0.0
        };
        blocks.push(Block {
            name: node.name.clone(),
            offset,
            len: model.num_states(),
            exit_probability,
        });
        offset += model.num_states();
    }
    let total = offset;
    let block_index: BTreeMap<&str, usize> =
        blocks.iter().enumerate().map(|(b, bl)| (bl.name.as_str(), b)).collect();
    let mut block_of = vec![0usize; total];
    let mut state_to_feature = Vec::with_capacity(total);
    for (b, bl) in blocks.iter().enumerate() {
        for local in 0..bl.len {
            block_of[bl.offset + local] = b;
            state_to_feature.push((feature_label(&grammar.nodes[b].model).to_string(), local));
        }
    }
    let local_model = |b: usize| &models[&blocks[b].name];

    let mut is_exit = vec![false; total];
    let mut scale = vec![1.0; total];
    for (b, bl) in blocks.iter().enumerate() {
        for &f in local_model(b).final_states() {
            is_exit[bl.offset + f] = true;
            scale[bl.offset + f] = 1.0 - bl.exit_probability;
        }
    }

    let mut links = Vec::new();
    for (e_idx, edge) in grammar.edges.iter().enumerate() {
        if edge.probability <= 0.0 {
            continue;
        }
        let a = block_index[edge.from.as_str()];
        let c = block_index[edge.to.as_str()];
        let target = local_model(c);
        for &x in local_model(a).final_states() {
            for (y, &pi) in target.initial().iter().enumerate() {
                if pi > 0.0 {
                    links.push(CrossLink {
                        edge: e_idx,
                        from_state: blocks[a].offset + x,
                        to_state: blocks[c].offset + y,
                        probability: blocks[a].exit_probability * edge.probability * pi,
                    });
                }
            }
        }
    }

    let mut initial = vec![0.0; total];
    for (name, p) in &grammar.start {
        let b = block_index[name.as_str()];
        for (local, &pi) in local_model(b).initial().iter().enumerate() {
            initial[blocks[b].offset + local] += p * pi;
        }
    }

    let n = total;
    let mut first = vec![0.0; n * n];
    let mut first_mask = vec![false; n * n];
    for (b, bl) in blocks.iter().enumerate() {
        let m = local_model(b);
        let ln = bl.len;
        for lj in 0..ln {
            for lk in 0..ln {
                let allowed = (0..ln).any(|li| m.allowed(li, lj, lk));
                let (gj, gk) = (bl.offset + lj, bl.offset + lk);
                first_mask[gj * n + gk] = allowed;
                first[gj * n + gk] = m.first_transition(lj, lk) * scale[gj];
            }
        }
    }
    for l in &links {
        first[l.from_state * n + l.to_state] += l.probability;
        first_mask[l.from_state * n + l.to_state] = true;
    }

    let mut transitions = vec![0.0; n * n * n];
    let mut topology = vec![false; n * n * n];
    for gi in 0..n {
        for gj in 0..n {
            let b = block_of[gj];
            let bl = &blocks[b];
            let m = local_model(b);
            let lj = gj - bl.offset;
            let row = (gi * n + gj) * n;
            for lk in 0..bl.len {
                let gk = bl.offset + lk;
                let (allowed, value) = if block_of[gi] == b {
                    let li = gi - bl.offset;
                    (m.allowed(li, lj, lk), m.transition(li, lj, lk))
                } else {
                    (first_mask[gj * n + gk] && (0..bl.len).any(|li| m.allowed(li, lj, lk)), m.first_transition(lj, lk))
                };
                topology[row + gk] = allowed;
                transitions[row + gk] = if allowed { value * scale[gj] } else { 0.0 };
            }
            if is_exit[gj] {
                for l in links.iter().filter(|l| l.from_state == gj) {
                    topology[row + l.to_state] = true;
                    transitions[row + l.to_state] += l.probability;
                }
            }
        }
    }
    renormalize_rows(&mut transitions, &topology, n * n, n);
    renormalize_rows(&mut first, &first_mask, n, n);
    let init_sum: f64 = initial.iter().sum();
    for p in &mut initial {
        *p /= init_sum;
    }

    let mut final_states = Vec::new();
    for name in &grammar.end {
        let b = block_index[name.as_str()];
        for &f in local_model(b).final_states() {
            final_states.push(blocks[b].offset + f);
        }
    }
    let emissions = blocks
        .iter()
        .enumerate()
        .flat_map(|(b, _)| local_model(b).emissions().iter().cloned())
        .collect();

    let merged = Hmm2Model::from_parts(Hmm2Parts {
        initial,
        first_transitions: first,
        transitions,
        emissions,
        topology,
        final_states,
    })?;
    let sources = grammar
        .nodes
        .iter()
        .map(|node| (node.name.clone(), models[&node.name].clone()))
        .collect();
    Ok(CompositeModel {
        merged,
        state_to_feature,
        blocks,
        grammar: grammar.clone(),
        sources,
        links,
    })
}

fn renormalize_rows(values: &mut [f64], mask: &[bool], rows: usize, width: usize) {
    for r in 0..rows {
        let row = &mut values[r * width..(r + 1) * width];
        let allowed = &mask[r * width..(r + 1) * width];
        if !allowed.iter().any(|&a| a) {
            continue;
        }
        let sum: f64 = row.iter().sum();
        if sum > 0.0 && (sum - 1.0).abs() > f64::EPSILON * width as f64 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
}

/// A labeled frame range `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(label: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            label: label.into(),
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Decoded run: contiguous labeled segments covering `[0, T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub segments: Vec<Segment>,
    pub log_joint: f64,
}

impl FeatureSequence {
    pub fn labels(&self) -> Vec<&str> {
        self.segments.iter().map(|s| s.label.as_str()).collect()
    }
}

/// Collapse a per-frame label sequence into maximal constant runs.
pub fn collapse_labels<'a, I>(labels: I) -> Vec<Segment>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut segments: Vec<Segment> = Vec::new();
    for (t, label) in labels.into_iter().enumerate() {
        match segments.last_mut() {
            Some(last) if last.label == label => last.end = t + 1,
            _ => segments.push(Segment::new(label, t, t + 1)),
        }
    }
    segments
}

/// Viterbi over the merged model, then map states to features. The result
/// exists only once the whole run has been seen.
pub fn decode_run(composite: &CompositeModel, seq: &ObservationSequence) -> Result<FeatureSequence> {
    let path = viterbi_decode(&composite.merged, seq)?;
    let segments = collapse_labels(path.states.iter().map(|&s| composite.label_of(s)));
    Ok(FeatureSequence {
        segments,
        log_joint: path.log_joint,
    })
}

/// Re-estimate grammar edge probabilities from unsegmented runs with every
/// feature model frozen. Edges never traversed fall to
/// `min_count / total` before renormalization; nodes never left keep
/// their previous weights.
pub fn learn_grammar_weights(
    composite: &CompositeModel,
    runs: &[ObservationSequence],
    config: &TrainingConfig,
) -> Result<Grammar> {
    config.validate()?;
    if runs.is_empty() {
        return Err(Error::invalid("no runs to learn grammar weights from"));
    }
    for (index, run) in runs.iter().enumerate() {
        if run.len() < 3 {
            return Err(Error::Sequence {
                index,
                message: format!("{} frames; at least 3 are needed", run.len()),
            });
        }
    }
    let mut current = composite.clone();
    let mut prev_ll: Option<f64> = None;
    for iteration in 0..config.max_iterations {
        let stats = accumulate_corpus_inner(&current.merged, runs, false)?;
        let ll = stats.total_log_likelihood;
        log::debug!("grammar iteration {iteration}: log-likelihood {ll}");
        if let Some(prev) = prev_ll {
            if (ll - prev) / prev.abs().max(f64::MIN_POSITIVE) < config.rel_ll_tolerance {
                break;
            }
        }
        prev_ll = Some(ll);

        let n = current.merged.num_states();
        let mut counts = vec![0.0; current.grammar.edges.len()];
        for link in &current.links {
            let (x, y) = (link.from_state, link.to_state);
            let cross = cross_total(&current, x, y);
            let first_raw = cross + within_first(&current, x, y);
            counts[link.edge] += stats.first_sum[x * n + y] * link.probability / first_raw;
            for i in 0..n {
                let eta = stats.eta_sum[(i * n + x) * n + y];
                if eta > 0.0 {
                    let raw = cross + within_tensor(&current, i, x, y);
                    counts[link.edge] += eta * link.probability / raw;
                }
            }
        }

        let mut grammar = current.grammar.clone();
        for node in &current.grammar.nodes {
            let idx: Vec<usize> = (0..grammar.edges.len())
                .filter(|&e| grammar.edges[e].from == node.name)
                .collect();
            let observed: f64 = idx.iter().map(|&e| counts[e]).sum();
            if idx.is_empty() || observed < config.min_count {
                continue;
            }
            let floored: Vec<f64> = idx.iter().map(|&e| counts[e].max(config.min_count)).collect();
            let total: f64 = floored.iter().sum();
            for (&e, c) in idx.iter().zip(&floored) {
                grammar.edges[e].probability = c / total;
            }
        }
        current = compose(&grammar, &current.sources)?;
    }
    Ok(current.grammar)
}

fn cross_total(composite: &CompositeModel, x: usize, y: usize) -> f64 {
    composite
        .links
        .iter()
        .filter(|l| l.from_state == x && l.to_state == y)
        .map(|l| l.probability)
        .sum()
}

fn block_local(composite: &CompositeModel, g: usize) -> (usize, usize) {
    let b = composite
        .blocks
        .iter()
        .position(|bl| g >= bl.offset && g < bl.offset + bl.len)
        .expect("state belongs to a block");
    (b, g - composite.blocks[b].offset)
}

fn within_first(composite: &CompositeModel, x: usize, y: usize) -> f64 {
    let (bx, lx) = block_local(composite, x);
    let (by, ly) = block_local(composite, y);
    if bx != by {
        return 0.0;
    }
    let bl = &composite.blocks[bx];
    composite.sources[&bl.name].first_transition(lx, ly) * (1.0 - bl.exit_probability)
}

fn within_tensor(composite: &CompositeModel, i: usize, x: usize, y: usize) -> f64 {
    let (bx, lx) = block_local(composite, x);
    let (by, ly) = block_local(composite, y);
    if bx != by {
        return 0.0;
    }
    let bl = &composite.blocks[bx];
    let m = &composite.sources[&bl.name];
    let (bi, li) = block_local(composite, i);
    let v = if bi == bx {
        m.transition(li, lx, ly)
    } else {
        m.first_transition(lx, ly)
    };
    v * (1.0 - bl.exit_probability)
}
