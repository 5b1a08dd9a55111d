//! Domain types for second-order HMMs: the model itself, its Gaussian
//! mixture emissions and observation sequences.

mod document;
mod gaussian;

use serde::{Deserialize, Serialize};

pub use document::{load_model, model_from_json, model_to_json, save_model, ModelDocument, MODEL_FORMAT_VERSION};
pub use gaussian::{
    floor_covariance, CovarianceMode, GaussianComponent, GaussianMixture, DEFAULT_VARIANCE_FLOOR,
};

use crate::error::{Error, Result};

/// Tolerance on every stochastic row (initial, first-step, tensor rows).
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// A run or segment: `T` frames of `D` real-valued channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSequence {
    frames: Vec<Vec<f64>>,
    /// Seconds between frames; metadata only.
    pub frame_period: f64,
    pub channel_names: Vec<String>,
}

impl ObservationSequence {
    /// Frames must be nonempty and share one dimension. Channel names
    /// default to `ch0..chD` when `channel_names` is empty.
    pub fn new(frames: Vec<Vec<f64>>, frame_period: f64, channel_names: Vec<String>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::invalid("observation sequence has no frames"));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::invalid("observation frames have zero channels"));
        }
        if let Some(t) = frames.iter().position(|f| f.len() != dim) {
            return Err(Error::invalid(format!(
                "frame {t} has {} channels, expected {dim}",
                frames[t].len()
            )));
        }
        let channel_names = if channel_names.is_empty() {
            (0..dim).map(|d| format!("ch{d}")).collect()
        } else if channel_names.len() == dim {
            channel_names
        } else {
            return Err(Error::invalid(format!(
                "{} channel names for {dim} channels",
                channel_names.len()
            )));
        };
        Ok(Self {
            frames,
            frame_period,
            channel_names,
        })
    }

    pub fn from_frames(frames: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(frames, 1.0, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].len()
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t]
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(format!(
                "slice [{start}, {end}) outside [0, {})",
                self.len()
            )));
        }
        Self::new(
            self.frames[start..end].to_vec(),
            self.frame_period,
            self.channel_names.clone(),
        )
    }

    /// Keep only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("channel selection is empty"));
        }
        if let Some(c) = channels.iter().find(|&&c| c >= self.dim()) {
            return Err(Error::invalid(format!(
                "channel {c} out of range for {} channels",
                self.dim()
            )));
        }
        let frames = self
            .frames
            .iter()
            .map(|f| channels.iter().map(|&c| f[c]).collect())
            .collect();
        let names = channels.iter().map(|&c| self.channel_names[c].clone()).collect();
        Self::new(frames, self.frame_period, names)
    }
}

/// Raw parameter blocks of an [`Hmm2Model`], used to build or rebuild one.
///
/// Layouts: `first_transitions[j * N + k]`, `transitions[(i * N + j) * N + k]`
/// and `topology` shares the tensor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Hmm2Parts {
    pub initial: Vec<f64>,
    pub first_transitions: Vec<f64>,
    pub transitions: Vec<f64>,
    pub emissions: Vec<GaussianMixture>,
    pub topology: Vec<bool>,
    pub final_states: Vec<usize>,
}

/// Second-order HMM with Gaussian-mixture emissions.
///
/// `P(Q, O) = pi_{q1} b_{q1}(o1) a_{q1 q2} b_{q2}(o2) prod_{t>=3} a_{q(t-2) q(t-1) q(t)} b_{qt}(ot)`.
///
/// Immutable once built; all log-domain tables and sparse adjacency lists
/// used by the lattice algorithms are computed at construction.
#[derive(Debug, Clone)]
pub struct Hmm2Model {
    parts: Hmm2Parts,
    num_states: usize,
    obs_dim: usize,
    log_initial: Vec<f64>,
    log_first: Vec<f64>,
    log_transitions: Vec<f64>,
    predecessors: Vec<Vec<usize>>,
    successors: Vec<Vec<usize>>,
    first_successors: Vec<Vec<usize>>,
    is_final: Vec<bool>,
}

impl PartialEq for Hmm2Model {
    fn eq(&self, other: &Self) -> bool {
        self.parts == other.parts
    }
}

impl Hmm2Model {
    pub fn from_parts(parts: Hmm2Parts) -> Result<Self> {
        let n = parts.initial.len();
        if n == 0 {
            return Err(Error::invalid("model needs at least one state"));
        }
        if parts.first_transitions.len() != n * n {
            return Err(Error::invalid("first-step transition matrix has wrong size"));
        }
        if parts.transitions.len() != n * n * n || parts.topology.len() != n * n * n {
            return Err(Error::invalid("transition tensor or topology has wrong size"));
        }
        if parts.emissions.len() != n {
            return Err(Error::invalid(format!(
                "{} emission mixtures for {n} states",
                parts.emissions.len()
            )));
        }
        let obs_dim = parts.emissions[0].dim();
        if parts.emissions.iter().any(|m| m.dim() != obs_dim) {
            return Err(Error::invalid("emission mixtures disagree on dimension"));
        }
        if parts.final_states.is_empty() {
            return Err(Error::Invariant("model has no final state".into()));
        }
        if let Some(s) = parts.final_states.iter().find(|&&s| s >= n) {
            return Err(Error::Invariant(format!("final state {s} out of range")));
        }

        let all = parts
            .initial
            .iter()
            .chain(&parts.first_transitions)
            .chain(&parts.transitions);
        if all.clone().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Invariant("probability negative or non-finite".into()));
        }
        check_sum("initial probabilities", parts.initial.iter().sum())?;

        let idx = |i: usize, j: usize, k: usize| (i * n + j) * n + k;
        let mut first_allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut any = false;
                let mut sum = 0.0;
                for k in 0..n {
                    let e = idx(i, j, k);
                    if parts.topology[e] {
                        any = true;
                        first_allowed[j * n + k] = true;
                    } else if parts.transitions[e] != 0.0 {
                        return Err(Error::Invariant(format!(
                            "a[{i}][{j}][{k}] = {} where topology forbids it",
                            parts.transitions[e]
                        )));
                    }
                    sum += parts.transitions[e];
                }
                if any {
                    check_sum(&format!("transition row ({i},{j})"), sum)?;
                }
            }
        }
        for j in 0..n {
            let row = &parts.first_transitions[j * n..(j + 1) * n];
            let mut any = false;
            for k in 0..n {
                if first_allowed[j * n + k] {
                    any = true;
                } else if row[k] != 0.0 {
                    return Err(Error::Invariant(format!(
                        "first-step a[{j}][{k}] = {} where topology forbids it",
                        row[k]
                    )));
                }
            }
            if any {
                check_sum(&format!("first-step row {j}"), row.iter().sum())?;
            }
        }

        let mut final_states = parts.final_states.clone();
        final_states.sort_unstable();
        final_states.dedup();
        let mut is_final = vec![false; n];
        for &s in &final_states {
            is_final[s] = true;
        }

        let log_initial: Vec<f64> = parts.initial.iter().map(|p| p.ln()).collect();
        let log_first: Vec<f64> = parts.first_transitions.iter().map(|p| p.ln()).collect();
        let log_transitions: Vec<f64> = parts.transitions.iter().map(|p| p.ln()).collect();
        let mut predecessors = vec![Vec::new(); n * n];
        let mut successors = vec![Vec::new(); n * n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if parts.transitions[idx(i, j, k)] > 0.0 {
                        predecessors[j * n + k].push(i);
                        successors[i * n + j].push(k);
                    }
                }
            }
        }
        let first_successors = (0..n)
            .map(|j| (0..n).filter(|&k| parts.first_transitions[j * n + k] > 0.0).collect())
            .collect();

        let mut parts = parts;
        parts.final_states = final_states;
        Ok(Self {
            parts,
            num_states: n,
            obs_dim,
            log_initial,
            log_first,
            log_transitions,
            predecessors,
            successors,
            first_successors,
            is_final,
        })
    }

    /// Left-right model: every state may loop on itself or advance by one.
    /// Uniform probabilities over allowed successors, all initial mass on
    /// state 0, last state final, zero-mean unit-variance emissions.
    pub fn new_left_right(num_states: usize, obs_dim: usize, num_mixtures: usize) -> Result<Self> {
        if num_states < 2 {
            return Err(Error::invalid("left-right model needs at least 2 states"));
        }
        if obs_dim == 0 || num_mixtures == 0 {
            return Err(Error::invalid("observation dimension and mixture count must be >= 1"));
        }
        let n = num_states;
        let topology = left_right_topology(n);
        let transitions = uniform_rows(&topology, n);
        let mut first_transitions = vec![0.0; n * n];
        for j in 0..n {
            let succ: Vec<usize> = (j..n.min(j + 2)).collect();
            for &k in &succ {
                first_transitions[j * n + k] = 1.0 / succ.len() as f64;
            }
        }
        let mut initial = vec![0.0; n];
        initial[0] = 1.0;
        let component = GaussianComponent::standard(obs_dim)?;
        let mixture = GaussianMixture::new(
            vec![component; num_mixtures],
            vec![1.0 / num_mixtures as f64; num_mixtures],
        )?;
        Self::from_parts(Hmm2Parts {
            initial,
            first_transitions,
            transitions,
            emissions: vec![mixture; n],
            topology,
            final_states: vec![n - 1],
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn parts(&self) -> &Hmm2Parts {
        &self.parts
    }

    pub fn into_parts(self) -> Hmm2Parts {
        self.parts
    }

    pub fn initial(&self) -> &[f64] {
        &self.parts.initial
    }

    pub fn first_transition(&self, j: usize, k: usize) -> f64 {
        self.parts.first_transitions[j * self.num_states + k]
    }

    pub fn transition(&self, i: usize, j: usize, k: usize) -> f64 {
        self.parts.transitions[self.tensor_index(i, j, k)]
    }

    pub fn allowed(&self, i: usize, j: usize, k: usize) -> bool {
        self.parts.topology[self.tensor_index(i, j, k)]
    }

    pub fn emissions(&self) -> &[GaussianMixture] {
        &self.parts.emissions
    }

    pub fn final_states(&self) -> &[usize] {
        &self.parts.final_states
    }

    pub fn is_final(&self, state: usize) -> bool {
        self.is_final[state]
    }

    #[inline]
    pub(crate) fn tensor_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.num_states + j) * self.num_states + k
    }

    pub(crate) fn log_initial(&self, i: usize) -> f64 {
        self.log_initial[i]
    }

    pub(crate) fn log_first(&self, j: usize, k: usize) -> f64 {
        self.log_first[j * self.num_states + k]
    }

    pub(crate) fn log_transition(&self, i: usize, j: usize, k: usize) -> f64 {
        self.log_transitions[self.tensor_index(i, j, k)]
    }

    /// States `i` with `a_ijk > 0`, ascending.
    pub(crate) fn predecessors(&self, j: usize, k: usize) -> &[usize] {
        &self.predecessors[j * self.num_states + k]
    }

    /// States `k` with `a_ijk > 0`, ascending.
    pub(crate) fn successors(&self, i: usize, j: usize) -> &[usize] {
        &self.successors[i * self.num_states + j]
    }

    pub(crate) fn first_successors(&self, j: usize) -> &[usize] {
        &self.first_successors[j]
    }

    /// `ln b_state(frame)`.
    pub fn log_emission(&self, state: usize, frame: &[f64]) -> Result<f64> {
        if state >= self.num_states {
            return Err(Error::invalid(format!(
                "state {state} out of range for {} states",
                self.num_states
            )));
        }
        if frame.len() != self.obs_dim {
            return Err(Error::invalid(format!(
                "frame has {} channels, model expects {}",
                frame.len(),
                self.obs_dim
            )));
        }
        Ok(self.parts.emissions[state].log_density(frame))
    }

    /// Emission log-densities for every (frame, state), row-major `T x N`.
    pub fn emission_table(&self, seq: &ObservationSequence) -> Result<Vec<f64>> {
        if seq.dim() != self.obs_dim {
            return Err(Error::invalid(format!(
                "sequence has {} channels, model expects {}",
                seq.dim(),
                self.obs_dim
            )));
        }
        let mut table = Vec::with_capacity(seq.len() * self.num_states);
        for frame in seq.frames() {
            for mix in &self.parts.emissions {
                table.push(mix.log_density(frame));
            }
        }
        Ok(table)
    }

    /// Draw a state path and frames of length `len`. Fails when the path
    /// reaches a state pair with no successor.
    pub fn sample<R: rand::Rng + ?Sized>(
        &self,
        rng: &mut R,
        len: usize,
    ) -> Result<(Vec<usize>, ObservationSequence)> {
        if len == 0 {
            return Err(Error::invalid("sample length must be >= 1"));
        }
        let n = self.num_states;
        let mut states = Vec::with_capacity(len);
        states.push(gaussian::pick_index(rng, &self.parts.initial));
        while states.len() < len {
            let t = states.len();
            let row = if t == 1 {
                let j = states[0];
                &self.parts.first_transitions[j * n..(j + 1) * n]
            } else {
                let (i, j) = (states[t - 2], states[t - 1]);
                &self.parts.transitions[(i * n + j) * n..(i * n + j + 1) * n]
            };
            if row.iter().all(|&p| p <= 0.0) {
                return Err(Error::Invariant(format!("no successor after {:?}", &states[t.saturating_sub(2)..])));
            }
            states.push(gaussian::pick_index(rng, row));
        }
        let frames = states.iter().map(|&s| self.parts.emissions[s].sample(rng)).collect();
        Ok((states, ObservationSequence::from_frames(frames)?))
    }

    /// Probability of staying exactly `n` frames in interior left-right
    /// state `state`, from `a_{s-1,s,s+1}` (enter and leave at once) and
    /// `a_{s,s,s}` (keep looping).
    pub fn state_duration_pmf(&self, state: usize, n: i64) -> Result<f64> {
        if state == 0 || state + 1 >= self.num_states {
            return Err(Error::invalid(format!(
                "state {state} is not an interior left-right state"
            )));
        }
        let leave_at_once = self.transition(state - 1, state, state + 1);
        let stay = self.transition(state, state, state);
        duration_pmf(leave_at_once, stay, n)
    }
}

fn check_sum(what: &str, sum: f64) -> Result<()> {
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Normalization {
            what: what.to_string(),
            sum,
        });
    }
    Ok(())
}

/// `d(0) = 0`, `d(1) = leave_at_once`,
/// `d(n) = (1 - leave_at_once) * stay^(n-2) * (1 - stay)` for `n >= 2`.
pub fn duration_pmf(leave_at_once: f64, stay: f64, n: i64) -> Result<f64> {
    if n < 0 {
        return Err(Error::invalid(format!("duration {n} is negative")));
    }
    Ok(match n {
        0 => 0.0,
        1 => leave_at_once,
        _ => (1.0 - leave_at_once) * stay.powi((n - 2) as i32) * (1.0 - stay),
    })
}

/// Mask allowing `k in {j, j+1}` for every `(i, j)`.
pub fn left_right_topology(n: usize) -> Vec<bool> {
    let mut mask = vec![false; n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in j..n.min(j + 2) {
                mask[(i * n + j) * n + k] = true;
            }
        }
    }
    mask
}

/// Tensor with uniform probabilities over each row's allowed entries.
pub fn uniform_rows(topology: &[bool], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n * n];
    for row in 0..n * n {
        let allowed = &topology[row * n..(row + 1) * n];
        let count = allowed.iter().filter(|&&a| a).count();
        for k in 0..n {
            if allowed[k] {
                out[row * n + k] = 1.0 / count as f64;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn left_right_structure() {
        let m = Hmm2Model::new_left_right(3, 2, 1).unwrap();
        assert_eq!(m.initial(), &[1.0, 0.0, 0.0]);
        assert_eq!(m.final_states(), &[2]);
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let ok = k == j || k == j + 1;
                    assert_eq!(m.allowed(i, j, k), ok, "({i},{j},{k})");
                    assert_eq!(m.transition(i, j, k) > 0.0, ok);
                }
            }
        }
        assert_eq!(m.transition(0, 2, 2), 1.0);
    }

    #[test]
    fn left_right_rejects_bad_sizes() {
        assert!(matches!(Hmm2Model::new_left_right(1, 1, 1), Err(Error::InvalidArgument(_))));
        assert!(Hmm2Model::new_left_right(3, 0, 1).is_err());
        assert!(Hmm2Model::new_left_right(3, 1, 0).is_err());
    }

    #[test]
    fn left_right_rows_normalized() {
        let m = Hmm2Model::new_left_right(5, 8, 1).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let s: f64 = (0..5).map(|k| m.transition(i, j, k)).sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn masked_entries_rejected() {
        let m = Hmm2Model::new_left_right(3, 1, 1).unwrap();
        let mut parts = m.into_parts();
        parts.transitions[0] = 0.4; // (0,0,0)
        parts.transitions[2] = 0.1; // (0,0,2) masked
        parts.transitions[1] = 0.5;
        assert!(matches!(Hmm2Model::from_parts(parts), Err(Error::Invariant(_))));
    }

    #[test]
    fn log_emission_checks_dimension() {
        let m = Hmm2Model::new_left_right(2, 2, 1).unwrap();
        assert!(m.log_emission(0, &[0.0]).is_err());
        assert!(m.log_emission(5, &[0.0, 0.0]).is_err());
        let v = m.log_emission(1, &[0.0, 0.0]).unwrap();
        assert!((v - 2.0 * -0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn duration_pmf_values() {
        assert_eq!(duration_pmf(0.2, 0.5, 0).unwrap(), 0.0);
        assert_eq!(duration_pmf(0.2, 0.5, 1).unwrap(), 0.2);
        assert!((duration_pmf(0.2, 0.5, 2).unwrap() - 0.4).abs() < 1e-15);
        assert!((duration_pmf(0.2, 0.5, 3).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(duration_pmf(0.2, 0.5, -1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn state_duration_needs_interior_state() {
        let m = Hmm2Model::new_left_right(4, 1, 1).unwrap();
        assert!(m.state_duration_pmf(0, 1).is_err());
        assert!(m.state_duration_pmf(3, 1).is_err());
        assert_eq!(m.state_duration_pmf(1, 1).unwrap(), 0.5);
    }

    #[test]
    fn sequence_validation() {
        assert!(ObservationSequence::from_frames(vec![]).is_err());
        assert!(ObservationSequence::from_frames(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        let s = ObservationSequence::from_frames(vec![vec![1.0, 2.0, 3.0]; 4]).unwrap();
        assert_eq!(s.channel_names, vec!["ch0", "ch1", "ch2"]);
        let sel = s.select_channels(&[2, 0]).unwrap();
        assert_eq!(sel.frame(0), &[3.0, 1.0]);
        assert!(s.select_channels(&[3]).is_err());
    }
}
