//! Baum-Welch estimation of HMM2 parameters.
//!
//! Expected counts come from the pair lattices: `eta_t(i,j,k)` is the
//! posterior of the state triple `(q_{t-1}, q_t, q_{t+1})` for interior
//! frames, `xi` and `gamma` are its marginals. Transition tensors are
//! re-estimated either conditioned on the earliest state (second order) or
//! averaged over it (first order, which yields an HMM1 broadcast into the
//! tensor).
//!
//! Emission statistics use the per-frame state occupancy
//! `P(q_t = i | O)` over all `T` frames, so that every frame (including the
//! first and last) contributes to the Gaussian updates. Mixtures with more
//! than one component split that occupancy by component responsibility;
//! this extends the single-Gaussian update in the usual way.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{backward_with_table, forward_with_table};
use crate::model::{
    floor_covariance, left_right_topology, uniform_rows, CovarianceMode, GaussianComponent,
    GaussianMixture, Hmm2Model, Hmm2Parts, ObservationSequence, DEFAULT_VARIANCE_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    FirstOrder,
    #[default]
    SecondOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub max_iterations: usize,
    pub rel_ll_tolerance: f64,
    pub order_mode: OrderMode,
    pub variance_floor: f64,
    /// Rows whose expected count falls below this keep their previous values.
    pub min_count: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            rel_ll_tolerance: 1e-6,
            order_mode: OrderMode::SecondOrder,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            min_count: 1e-3,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        for (name, v) in [
            ("rel_ll_tolerance", self.rel_ll_tolerance),
            ("variance_floor", self.variance_floor),
            ("min_count", self.min_count),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Expected counts accumulated against one fixed model.
///
/// Emission sums are stored per mixture component in model order; outer
/// products are taken about the accumulating model's component means.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub num_states: usize,
    pub obs_dim: usize,
    /// `sum_t eta_t(i,j,k)`, tensor layout.
    pub eta_sum: Vec<f64>,
    /// `sum_t xi_t(i,j)`.
    pub xi_sum: Vec<f64>,
    /// `sum_t gamma_t(i)` over the interior frames where `eta` is defined.
    pub gamma_sum: Vec<f64>,
    /// `P(q_1 = i)` summed over sequences.
    pub initial_sum: Vec<f64>,
    /// `P(q_1 = j, q_2 = k)` summed over sequences.
    pub first_sum: Vec<f64>,
    /// `sum_t P(q_t = i)` over all frames.
    pub occupancy_sum: Vec<f64>,
    /// Per component: `sum_t gamma_t(i, m)`.
    pub component_weight: Vec<f64>,
    /// Per component, `D` values: `sum_t gamma_t(i, m) o_t`.
    pub weighted_frame_sum: Vec<f64>,
    /// Per component, `D x D` values: `sum_t gamma_t(i, m) (o_t - mu)(o_t - mu)^T`.
    pub weighted_outer_sum: Vec<f64>,
    pub num_sequences: usize,
    pub total_log_likelihood: f64,
}

impl SufficientStats {
    pub fn zeros(model: &Hmm2Model) -> Self {
        let n = model.num_states();
        let d = model.obs_dim();
        let comps: usize = model.emissions().iter().map(GaussianMixture::len).sum();
        Self {
            num_states: n,
            obs_dim: d,
            eta_sum: vec![0.0; n * n * n],
            xi_sum: vec![0.0; n * n],
            gamma_sum: vec![0.0; n],
            initial_sum: vec![0.0; n],
            first_sum: vec![0.0; n * n],
            occupancy_sum: vec![0.0; n],
            component_weight: vec![0.0; comps],
            weighted_frame_sum: vec![0.0; comps * d],
            weighted_outer_sum: vec![0.0; comps * d * d],
            num_sequences: 0,
            total_log_likelihood: 0.0,
        }
    }

    /// Elementwise sum; both sides must come from the same model shape.
    pub fn merge(&mut self, other: &SufficientStats) -> Result<()> {
        if self.num_states != other.num_states
            || self.obs_dim != other.obs_dim
            || self.component_weight.len() != other.component_weight.len()
        {
            return Err(Error::invalid("cannot merge statistics of different model shapes"));
        }
        fn add(a: &mut [f64], b: &[f64]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        add(&mut self.eta_sum, &other.eta_sum);
        add(&mut self.xi_sum, &other.xi_sum);
        add(&mut self.gamma_sum, &other.gamma_sum);
        add(&mut self.initial_sum, &other.initial_sum);
        add(&mut self.first_sum, &other.first_sum);
        add(&mut self.occupancy_sum, &other.occupancy_sum);
        add(&mut self.component_weight, &other.component_weight);
        add(&mut self.weighted_frame_sum, &other.weighted_frame_sum);
        add(&mut self.weighted_outer_sum, &other.weighted_outer_sum);
        self.num_sequences += other.num_sequences;
        self.total_log_likelihood += other.total_log_likelihood;
        Ok(())
    }
}

/// E-step for one sequence.
pub fn accumulate(model: &Hmm2Model, seq: &ObservationSequence) -> Result<SufficientStats> {
    accumulate_inner(model, seq, true)
}

pub(crate) fn accumulate_inner(
    model: &Hmm2Model,
    seq: &ObservationSequence,
    with_emissions: bool,
) -> Result<SufficientStats> {
    if seq.len() < 2 {
        return Err(Error::invalid("sequence needs at least 2 frames"));
    }
    let table = model.emission_table(seq)?;
    let num_frames = seq.len();
    let (alpha, ll) = forward_with_table(model, &table, num_frames)?;
    let beta = backward_with_table(model, &table, num_frames)?;
    let n = model.num_states();
    let mut stats = SufficientStats::zeros(model);
    stats.num_sequences = 1;
    stats.total_log_likelihood = ll;

    // occupancy[t * n + s] = P(q_t = s | O)
    let mut occupancy = vec![0.0; num_frames * n];
    for t in 1..num_frames {
        for j in 0..n {
            for k in 0..n {
                let lp = alpha.get(t, j, k) + beta.get(t, j, k);
                if !lp.is_finite() {
                    continue;
                }
                let p = (lp - ll).exp();
                if t == 1 {
                    stats.first_sum[j * n + k] += p;
                    stats.initial_sum[j] += p;
                    occupancy[j] += p;
                }
                occupancy[t * n + k] += p;
            }
        }
    }
    for t in 0..num_frames {
        for s in 0..n {
            stats.occupancy_sum[s] += occupancy[t * n + s];
        }
    }

    for t in 1..num_frames - 1 {
        for i in 0..n {
            for j in 0..n {
                let a = alpha.get(t, i, j);
                if !a.is_finite() {
                    continue;
                }
                for &k in model.successors(i, j) {
                    let lp = a
                        + model.log_transition(i, j, k)
                        + table[(t + 1) * n + k]
                        + beta.get(t + 1, j, k);
                    if !lp.is_finite() {
                        continue;
                    }
                    let p = (lp - ll).exp();
                    stats.eta_sum[(i * n + j) * n + k] += p;
                    stats.xi_sum[i * n + j] += p;
                    stats.gamma_sum[i] += p;
                }
            }
        }
    }

    if with_emissions {
        accumulate_emissions(model, seq, &occupancy, &mut stats);
    }
    Ok(stats)
}

fn accumulate_emissions(
    model: &Hmm2Model,
    seq: &ObservationSequence,
    occupancy: &[f64],
    stats: &mut SufficientStats,
) {
    let n = model.num_states();
    let d = model.obs_dim();
    let mut resp = Vec::new();
    let mut diff = vec![0.0; d];
    for (t, frame) in seq.frames().iter().enumerate() {
        let mut offset = 0;
        for s in 0..n {
            let mix = &model.emissions()[s];
            let w = occupancy[t * n + s];
            if w > 0.0 {
                resp.clear();
                if mix.len() == 1 {
                    resp.push(1.0);
                } else {
                    let total = mix.log_density(frame);
                    resp.extend(mix.component_log_terms(frame).map(|lt| (lt - total).exp()));
                }
                for (m, comp) in mix.components().iter().enumerate() {
                    let r = w * resp[m];
                    if r == 0.0 {
                        continue;
                    }
                    let c = offset + m;
                    stats.component_weight[c] += r;
                    for (x, (o, mu)) in diff.iter_mut().zip(frame.iter().zip(comp.mean())) {
                        *x = o - mu;
                    }
                    let fs = &mut stats.weighted_frame_sum[c * d..(c + 1) * d];
                    for (acc, o) in fs.iter_mut().zip(frame) {
                        *acc += r * o;
                    }
                    let os = &mut stats.weighted_outer_sum[c * d * d..(c + 1) * d * d];
                    match comp.mode() {
                        CovarianceMode::Diagonal => {
                            for a in 0..d {
                                os[a * d + a] += r * diff[a] * diff[a];
                            }
                        }
                        CovarianceMode::Full => {
                            for a in 0..d {
                                for b in 0..d {
                                    os[a * d + b] += r * diff[a] * diff[b];
                                }
                            }
                        }
                    }
                }
            }
            offset += mix.len();
        }
    }
}

/// Counts of parameters left unchanged or clamped by one re-estimation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReestimationReport {
    /// Transition rows (initial, first-step, tensor) kept from the previous
    /// model because their expected count fell below `min_count`.
    pub floored_rows: usize,
    /// Covariances raised to the variance floor.
    pub floored_covariances: usize,
    /// Components or mixtures kept because they received almost no mass.
    pub kept_components: usize,
}

/// M-step. Masked entries stay zero; rows with too little evidence keep
/// their previous values.
pub fn reestimate(
    model: &Hmm2Model,
    stats: &SufficientStats,
    mode: OrderMode,
    config: &TrainingConfig,
) -> Result<(Hmm2Model, ReestimationReport)> {
    let n = model.num_states();
    let d = model.obs_dim();
    let expected_comps: usize = model.emissions().iter().map(GaussianMixture::len).sum();
    if stats.num_states != n || stats.obs_dim != d || stats.component_weight.len() != expected_comps {
        return Err(Error::invalid("statistics were accumulated against a different model shape"));
    }
    let mut report = ReestimationReport::default();
    let mut parts = model.parts().clone();
    let min = config.min_count;

    let total_initial: f64 = stats.initial_sum.iter().sum();
    if total_initial >= min {
        parts.initial = stats.initial_sum.iter().map(|c| c / total_initial).collect();
    } else {
        report.floored_rows += 1;
    }

    for j in 0..n {
        let counts = &stats.first_sum[j * n..(j + 1) * n];
        let total: f64 = counts.iter().sum();
        if total >= min {
            for k in 0..n {
                parts.first_transitions[j * n + k] = counts[k] / total;
            }
        } else if model.first_successors(j).len() > 1 {
            report.floored_rows += 1;
        }
    }

    match mode {
        OrderMode::SecondOrder => {
            for row in 0..n * n {
                let allowed = &parts.topology[row * n..(row + 1) * n];
                if !allowed.iter().any(|&a| a) {
                    continue;
                }
                let counts = &stats.eta_sum[row * n..(row + 1) * n];
                let total: f64 = counts.iter().sum();
                if total >= min {
                    for k in 0..n {
                        parts.transitions[row * n + k] = counts[k] / total;
                    }
                } else {
                    report.floored_rows += 1;
                }
            }
        }
        OrderMode::FirstOrder => {
            for j in 0..n {
                let mut pooled = vec![0.0; n];
                for i in 0..n {
                    for k in 0..n {
                        pooled[k] += stats.eta_sum[(i * n + j) * n + k];
                    }
                }
                let total: f64 = pooled.iter().sum();
                let live_rows = (0..n)
                    .filter(|&i| parts.topology[(i * n + j) * n..(i * n + j + 1) * n].iter().any(|&a| a))
                    .count();
                if total < min {
                    report.floored_rows += live_rows;
                    continue;
                }
                let shared: Vec<f64> = pooled.iter().map(|c| c / total).collect();
                for i in 0..n {
                    let base = (i * n + j) * n;
                    let allowed = &parts.topology[base..base + n];
                    if !allowed.iter().any(|&a| a) {
                        continue;
                    }
                    let fits = (0..n).all(|k| allowed[k] || shared[k] == 0.0);
                    if fits {
                        parts.transitions[base..base + n].copy_from_slice(&shared);
                    } else {
                        let kept: f64 = (0..n).filter(|&k| allowed[k]).map(|k| shared[k]).sum();
                        if kept <= 0.0 {
                            report.floored_rows += 1;
                            continue;
                        }
                        for k in 0..n {
                            parts.transitions[base + k] =
                                if allowed[k] { shared[k] / kept } else { 0.0 };
                        }
                    }
                }
            }
        }
    }

    let mut offset = 0;
    let mut emissions = Vec::with_capacity(n);
    for mix in model.emissions() {
        let m_count = mix.len();
        let weights = &stats.component_weight[offset..offset + m_count];
        let state_total: f64 = weights.iter().sum();
        if state_total < min {
            report.kept_components += 1;
            emissions.push(mix.clone());
            offset += m_count;
            continue;
        }
        let mut components = Vec::with_capacity(m_count);
        let mut new_weights = Vec::with_capacity(m_count);
        for (m, comp) in mix.components().iter().enumerate() {
            let c = offset + m;
            let w = stats.component_weight[c];
            if w < min {
                report.kept_components += 1;
                components.push(comp.clone());
                new_weights.push(w.max(0.0));
                continue;
            }
            let mean: Vec<f64> = stats.weighted_frame_sum[c * d..(c + 1) * d]
                .iter()
                .map(|s| s / w)
                .collect();
            // outer sums are about the old mean; shift them to the new one
            let shift: Vec<f64> = mean.iter().zip(comp.mean()).map(|(a, b)| a - b).collect();
            let outer = &stats.weighted_outer_sum[c * d * d..(c + 1) * d * d];
            let mut cov = vec![0.0; d * d];
            for a in 0..d {
                for b in 0..d {
                    let keep = comp.mode() == CovarianceMode::Full || a == b;
                    if keep {
                        cov[a * d + b] = outer[a * d + b] / w - shift[a] * shift[b];
                    }
                }
            }
            let (cov, floored) = floor_covariance(&cov, d, comp.mode(), config.variance_floor);
            if floored {
                report.floored_covariances += 1;
            }
            components.push(GaussianComponent::new(mean, cov, comp.mode())?);
            new_weights.push(w);
        }
        let wsum: f64 = new_weights.iter().sum();
        let new_weights = new_weights.iter().map(|w| w / wsum).collect();
        emissions.push(GaussianMixture::new(components, new_weights)?);
        offset += m_count;
    }
    parts.emissions = emissions;

    Ok((Hmm2Model::from_parts(parts)?, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub floored_rows: usize,
    pub floored_covariances: usize,
}

/// Training report document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub num_sequences: usize,
    pub num_frames: usize,
    pub order_mode: OrderMode,
    pub converged: bool,
    pub iterations: Vec<IterationRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: Hmm2Model,
    /// Corpus log-likelihood of the model entering each iteration.
    pub ll_trace: Vec<f64>,
    pub report: TrainingReport,
}

fn validate_corpus(model: &Hmm2Model, corpus: &[ObservationSequence]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    for (index, seq) in corpus.iter().enumerate() {
        if seq.len() < 3 {
            return Err(Error::Sequence {
                index,
                message: format!("{} frames; at least 3 are needed", seq.len()),
            });
        }
        if seq.dim() != model.obs_dim() {
            return Err(Error::Sequence {
                index,
                message: format!("{} channels; model expects {}", seq.dim(), model.obs_dim()),
            });
        }
    }
    Ok(())
}

/// Accumulate over a corpus. Sequences are processed in parallel and merged
/// in corpus order, so the result does not depend on scheduling.
pub fn accumulate_corpus(model: &Hmm2Model, corpus: &[ObservationSequence]) -> Result<SufficientStats> {
    accumulate_corpus_inner(model, corpus, true)
}

pub(crate) fn accumulate_corpus_inner(
    model: &Hmm2Model,
    corpus: &[ObservationSequence],
    with_emissions: bool,
) -> Result<SufficientStats> {
    let per_seq: Vec<Result<SufficientStats>> = corpus
        .par_iter()
        .map(|seq| accumulate_inner(model, seq, with_emissions))
        .collect();
    let mut total = SufficientStats::zeros(model);
    for (index, stats) in per_seq.into_iter().enumerate() {
        let stats = stats.map_err(|e| match e {
            Error::NumericFailure(m) => Error::NumericFailure(format!("sequence {index}: {m}")),
            other => other,
        })?;
        total.merge(&stats)?;
    }
    Ok(total)
}

/// Baum-Welch until the relative log-likelihood gain drops below
/// `rel_ll_tolerance` or `max_iterations` M-steps have run.
pub fn train(
    model: &Hmm2Model,
    corpus: &[ObservationSequence],
    config: &TrainingConfig,
) -> Result<TrainingOutcome> {
    config.validate()?;
    validate_corpus(model, corpus)?;
    let mut current = model.clone();
    let mut trace: Vec<f64> = Vec::new();
    let mut records = Vec::new();
    let mut converged = false;
    for iteration in 0..config.max_iterations {
        let stats = accumulate_corpus(&current, corpus)?;
        let ll = stats.total_log_likelihood;
        if let Some(&prev) = trace.last() {
            trace.push(ll);
            if (ll - prev) / prev.abs().max(f64::MIN_POSITIVE) < config.rel_ll_tolerance {
                records.push(IterationRecord {
                    iteration,
                    log_likelihood: ll,
                    floored_rows: 0,
                    floored_covariances: 0,
                });
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        let (next, rep) = reestimate(&current, &stats, config.order_mode, config)?;
        log::debug!("iteration {iteration}: log-likelihood {ll}");
        records.push(IterationRecord {
            iteration,
            log_likelihood: ll,
            floored_rows: rep.floored_rows,
            floored_covariances: rep.floored_covariances,
        });
        current = next;
    }
    Ok(TrainingOutcome {
        model: current,
        ll_trace: trace,
        report: TrainingReport {
            num_sequences: corpus.len(),
            num_frames: corpus.iter().map(ObservationSequence::len).sum(),
            order_mode: config.order_mode,
            converged,
            iterations: records,
        },
    })
}

/// Shape of a left-right feature model to initialize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeftRightShape {
    pub num_states: usize,
    pub num_mixtures: usize,
    pub covariance_mode: CovarianceMode,
}

impl LeftRightShape {
    pub fn new(num_states: usize) -> Self {
        Self {
            num_states,
            num_mixtures: 1,
            covariance_mode: CovarianceMode::Diagonal,
        }
    }
}

/// Initial left-right model: every sequence is cut into `N` equal chunks
/// and state `i` takes the pooled moments of chunk `i` across the corpus.
/// Transitions start uniform over allowed successors.
pub fn initialize_from_segments(
    shape: LeftRightShape,
    corpus: &[ObservationSequence],
    variance_floor: f64,
) -> Result<Hmm2Model> {
    let n = shape.num_states;
    if n < 2 {
        return Err(Error::invalid("left-right model needs at least 2 states"));
    }
    if shape.num_mixtures == 0 {
        return Err(Error::invalid("mixture count must be >= 1"));
    }
    let Some(first) = corpus.first() else {
        return Err(Error::invalid("initialization corpus is empty"));
    };
    let d = first.dim();
    for (index, seq) in corpus.iter().enumerate() {
        if seq.len() < n {
            return Err(Error::Sequence {
                index,
                message: format!("{} frames is shorter than {n} states", seq.len()),
            });
        }
        if seq.dim() != d {
            return Err(Error::Sequence {
                index,
                message: format!("{} channels; expected {d}", seq.dim()),
            });
        }
    }

    let mut counts = vec![0usize; n];
    let mut sums = vec![0.0; n * d];
    for seq in corpus {
        let len = seq.len();
        for state in 0..n {
            for t in (state * len / n)..((state + 1) * len / n) {
                counts[state] += 1;
                for (acc, v) in sums[state * d..(state + 1) * d].iter_mut().zip(seq.frame(t)) {
                    *acc += v;
                }
            }
        }
    }
    let means: Vec<Vec<f64>> = (0..n)
        .map(|s| sums[s * d..(s + 1) * d].iter().map(|v| v / counts[s] as f64).collect())
        .collect();
    let mut scatter = vec![0.0; n * d * d];
    for seq in corpus {
        let len = seq.len();
        for state in 0..n {
            let mu = &means[state];
            for t in (state * len / n)..((state + 1) * len / n) {
                let f = seq.frame(t);
                for a in 0..d {
                    for b in 0..d {
                        scatter[(state * d + a) * d + b] += (f[a] - mu[a]) * (f[b] - mu[b]);
                    }
                }
            }
        }
    }

    let mut emissions = Vec::with_capacity(n);
    for state in 0..n {
        let mut cov: Vec<f64> = scatter[state * d * d..(state + 1) * d * d]
            .iter()
            .map(|v| v / counts[state] as f64)
            .collect();
        if shape.covariance_mode == CovarianceMode::Diagonal {
            for a in 0..d {
                for b in 0..d {
                    if a != b {
                        cov[a * d + b] = 0.0;
                    }
                }
            }
        }
        let (cov, _) = floor_covariance(&cov, d, shape.covariance_mode, variance_floor);
        let m_count = shape.num_mixtures;
        let mut components = Vec::with_capacity(m_count);
        for m in 0..m_count {
            // spread components symmetrically around the pooled mean
            let offset = m as f64 - (m_count as f64 - 1.0) / 2.0;
            let mean = (0..d)
                .map(|a| means[state][a] + 0.5 * offset * cov[a * d + a].sqrt())
                .collect();
            components.push(GaussianComponent::new(mean, cov.clone(), shape.covariance_mode)?);
        }
        emissions.push(GaussianMixture::new(
            components,
            vec![1.0 / m_count as f64; m_count],
        )?);
    }

    let topology = left_right_topology(n);
    let transitions = uniform_rows(&topology, n);
    let mut first_transitions = vec![0.0; n * n];
    for j in 0..n {
        if j + 1 < n {
            first_transitions[j * n + j] = 0.5;
            first_transitions[j * n + j + 1] = 0.5;
        } else {
            first_transitions[j * n + j] = 1.0;
        }
    }
    let mut initial = vec![0.0; n];
    initial[0] = 1.0;
    Hmm2Model::from_parts(Hmm2Parts {
        initial,
        first_transitions,
        transitions,
        emissions,
        topology,
        final_states: vec![n - 1],
    })
}
