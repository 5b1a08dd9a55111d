//! Exact lattice algorithms for second-order HMMs.
//!
//! A second-order chain is first-order over the product space `S x S`, so
//! every lattice cell is indexed by a state pair. Frames are 0-based here:
//! cell `(t, a, b)` refers to `q_{t-1} = a, q_t = b` and exists for
//! `t in [1, T-1]`. All values are natural logarithms; forbidden
//! transitions are `-inf` and never smoothed.

use crate::error::{Error, Result};
use crate::logspace::{log_sum_exp_iter, LOG_ZERO};
use crate::model::{Hmm2Model, ObservationSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeRole {
    Viterbi,
    Forward,
    Backward,
}

/// `T x N x N` table of log-domain values over state pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionLattice {
    values: Vec<f64>,
    num_frames: usize,
    num_states: usize,
    role: LatticeRole,
}

impl TransitionLattice {
    fn new(num_frames: usize, num_states: usize, role: LatticeRole) -> Self {
        Self {
            values: vec![LOG_ZERO; num_frames * num_states * num_states],
            num_frames,
            num_states,
            role,
        }
    }

    pub fn role(&self) -> LatticeRole {
        self.role
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// Value for the pair `(q_{t-1}, q_t) = (a, b)`; `t` in `[1, T-1]`.
    #[inline]
    pub fn get(&self, t: usize, a: usize, b: usize) -> f64 {
        self.values[(t * self.num_states + a) * self.num_states + b]
    }

    #[inline]
    fn set(&mut self, t: usize, a: usize, b: usize, v: f64) {
        self.values[(t * self.num_states + a) * self.num_states + b] = v;
    }

    /// All `N x N` cells at frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let nn = self.num_states * self.num_states;
        &self.values[t * nn..(t + 1) * nn]
    }
}

/// Most likely state sequence with `ln P(Q, O)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPath {
    pub states: Vec<usize>,
    pub log_joint: f64,
}

fn check_inputs(model: &Hmm2Model, seq: &ObservationSequence) -> Result<Vec<f64>> {
    if seq.len() < 2 {
        return Err(Error::invalid(format!(
            "sequence of {} frame(s) is too short for the pair lattice (need >= 2)",
            seq.len()
        )));
    }
    model.emission_table(seq)
}

/// Viterbi decoding over state pairs. Ties go to the lowest predecessor
/// index; among equally good final pairs the lowest `(j, k)` wins.
pub fn viterbi_decode(model: &Hmm2Model, seq: &ObservationSequence) -> Result<DecodedPath> {
    let emissions = check_inputs(model, seq)?;
    viterbi_with_table(model, &emissions, seq.len())
}

pub(crate) fn viterbi_with_table(
    model: &Hmm2Model,
    emissions: &[f64],
    num_frames: usize,
) -> Result<DecodedPath> {
    let n = model.num_states();
    let b = |t: usize, s: usize| emissions[t * n + s];
    let mut delta = TransitionLattice::new(num_frames, n, LatticeRole::Viterbi);
    let mut back = vec![usize::MAX; num_frames * n * n];

    for j in 0..n {
        let start = model.log_initial(j);
        if start == LOG_ZERO {
            continue;
        }
        for &k in model.first_successors(j) {
            delta.set(1, j, k, start + b(0, j) + model.log_first(j, k) + b(1, k));
        }
    }
    for t in 2..num_frames {
        for j in 0..n {
            for k in 0..n {
                let mut best = LOG_ZERO;
                let mut arg = usize::MAX;
                for &i in model.predecessors(j, k) {
                    let v = delta.get(t - 1, i, j) + model.log_transition(i, j, k);
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                if arg != usize::MAX {
                    delta.set(t, j, k, best + b(t, k));
                    back[(t * n + j) * n + k] = arg;
                }
            }
        }
    }

    let last = num_frames - 1;
    let mut best = LOG_ZERO;
    let mut end = None;
    for j in 0..n {
        for &k in model.final_states() {
            let v = delta.get(last, j, k);
            if v > best {
                best = v;
                end = Some((j, k));
            }
        }
    }
    let (mut j, mut k) = end.ok_or(Error::DecodeFailure)?;
    if !best.is_finite() {
        return Err(Error::DecodeFailure);
    }
    let mut states = vec![0; num_frames];
    states[last] = k;
    states[last - 1] = j;
    for t in (2..num_frames).rev() {
        let i = back[(t * n + j) * n + k];
        states[t - 2] = i;
        k = j;
        j = i;
    }
    Ok(DecodedPath {
        states,
        log_joint: best,
    })
}

/// Forward pass; returns the lattice and `ln P(O)` summed over paths that
/// end in a final state.
pub fn forward(model: &Hmm2Model, seq: &ObservationSequence) -> Result<(TransitionLattice, f64)> {
    let emissions = check_inputs(model, seq)?;
    forward_with_table(model, &emissions, seq.len())
}

pub(crate) fn forward_with_table(
    model: &Hmm2Model,
    emissions: &[f64],
    num_frames: usize,
) -> Result<(TransitionLattice, f64)> {
    let n = model.num_states();
    let b = |t: usize, s: usize| emissions[t * n + s];
    let mut alpha = TransitionLattice::new(num_frames, n, LatticeRole::Forward);

    for j in 0..n {
        let start = model.log_initial(j);
        if start == LOG_ZERO {
            continue;
        }
        for &k in model.first_successors(j) {
            alpha.set(1, j, k, start + b(0, j) + model.log_first(j, k) + b(1, k));
        }
    }
    ensure_alive(&alpha, 1)?;
    for t in 2..num_frames {
        for j in 0..n {
            for k in 0..n {
                let preds = model.predecessors(j, k);
                if preds.is_empty() {
                    continue;
                }
                let s = log_sum_exp_iter(
                    preds
                        .iter()
                        .map(|&i| alpha.get(t - 1, i, j) + model.log_transition(i, j, k)),
                );
                if s != LOG_ZERO {
                    alpha.set(t, j, k, s + b(t, k));
                }
            }
        }
        ensure_alive(&alpha, t)?;
    }

    let last = num_frames - 1;
    let ll = log_sum_exp_iter(
        (0..n).flat_map(|j| model.final_states().iter().map(move |&k| (j, k)))
            .map(|(j, k)| alpha.get(last, j, k)),
    );
    if !ll.is_finite() {
        return Err(Error::NumericFailure(
            "no probability mass reaches a final state".into(),
        ));
    }
    Ok((alpha, ll))
}

/// Backward pass. The terminal column is `0` (probability one) for pairs
/// whose second state is final and `-inf` otherwise, so that
/// `alpha + beta` marginalizes to the same final-state likelihood the
/// forward pass reports. With every state final this is the all-ones
/// initialization.
pub fn backward(model: &Hmm2Model, seq: &ObservationSequence) -> Result<TransitionLattice> {
    let emissions = check_inputs(model, seq)?;
    backward_with_table(model, &emissions, seq.len())
}

pub(crate) fn backward_with_table(
    model: &Hmm2Model,
    emissions: &[f64],
    num_frames: usize,
) -> Result<TransitionLattice> {
    let n = model.num_states();
    let b = |t: usize, s: usize| emissions[t * n + s];
    let mut beta = TransitionLattice::new(num_frames, n, LatticeRole::Backward);
    let last = num_frames - 1;
    for i in 0..n {
        for &j in model.final_states() {
            beta.set(last, i, j, 0.0);
        }
    }
    for t in (1..last).rev() {
        for i in 0..n {
            for j in 0..n {
                let succ = model.successors(i, j);
                if succ.is_empty() {
                    continue;
                }
                let s = log_sum_exp_iter(succ.iter().map(|&k| {
                    model.log_transition(i, j, k) + b(t + 1, k) + beta.get(t + 1, j, k)
                }));
                beta.set(t, i, j, s);
            }
        }
        ensure_alive(&beta, t)?;
    }
    Ok(beta)
}

fn ensure_alive(lattice: &TransitionLattice, t: usize) -> Result<()> {
    if lattice.frame(t).iter().all(|&v| v == LOG_ZERO) {
        return Err(Error::NumericFailure(format!(
            "{:?} lattice vanished at frame {t}",
            lattice.role()
        )));
    }
    Ok(())
}

/// `ln P(Q, O)` of a given state path; `-inf` if the path is impossible
/// or does not end in a final state.
pub fn path_log_joint(model: &Hmm2Model, seq: &ObservationSequence, states: &[usize]) -> Result<f64> {
    if states.len() != seq.len() {
        return Err(Error::invalid("path length differs from sequence length"));
    }
    let emissions = check_inputs(model, seq)?;
    let n = model.num_states();
    if let Some(s) = states.iter().find(|&&s| s >= n) {
        return Err(Error::invalid(format!("state {s} out of range")));
    }
    if !model.is_final(states[states.len() - 1]) {
        return Ok(LOG_ZERO);
    }
    let mut lp = model.log_initial(states[0])
        + emissions[states[0]]
        + model.log_first(states[0], states[1])
        + emissions[n + states[1]];
    for t in 2..states.len() {
        lp += model.log_transition(states[t - 2], states[t - 1], states[t]) + emissions[t * n + states[t]];
    }
    Ok(lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GaussianComponent, GaussianMixture, Hmm2Parts};

    fn seq(values: &[f64]) -> ObservationSequence {
        ObservationSequence::from_frames(values.iter().map(|v| vec![*v]).collect()).unwrap()
    }

    fn single_state() -> Hmm2Model {
        Hmm2Model::from_parts(Hmm2Parts {
            initial: vec![1.0],
            first_transitions: vec![1.0],
            transitions: vec![1.0],
            emissions: vec![GaussianMixture::single(GaussianComponent::standard(1).unwrap())],
            topology: vec![true],
            final_states: vec![0],
        })
        .unwrap()
    }

    #[test]
    fn single_state_path_is_trivial() {
        let m = single_state();
        let s = seq(&[0.1, -0.4, 1.2, 0.0]);
        let path = viterbi_decode(&m, &s).unwrap();
        assert_eq!(path.states, vec![0; 4]);
        let expected: f64 = s.frames().iter().map(|f| m.log_emission(0, f).unwrap()).sum();
        assert!((path.log_joint - expected).abs() < 1e-12);
        let (_, ll) = forward(&m, &s).unwrap();
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn forced_advance_without_self_loops() {
        // 4 states, a_ijk nonzero only for k = j + 1; the last state is a dead end.
        let n = 4;
        let mut topology = vec![false; n * n * n];
        let mut transitions = vec![0.0; n * n * n];
        let mut first = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n - 1 {
                topology[(i * n + j) * n + j + 1] = true;
                transitions[(i * n + j) * n + j + 1] = 1.0;
            }
        }
        for j in 0..n - 1 {
            first[j * n + j + 1] = 1.0;
        }
        let mut initial = vec![0.0; n];
        initial[0] = 1.0;
        let emissions = (0..n)
            .map(|_| GaussianMixture::single(GaussianComponent::standard(1).unwrap()))
            .collect();
        let m = Hmm2Model::from_parts(Hmm2Parts {
            initial,
            first_transitions: first,
            transitions,
            emissions,
            topology,
            final_states: vec![n - 1],
        })
        .unwrap();
        let path = viterbi_decode(&m, &seq(&[3.0, -2.0, 0.5, 9.0])).unwrap();
        assert_eq!(path.states, vec![0, 1, 2, 3]);
    }

    #[test]
    fn unreachable_final_state_is_decode_failure() {
        // left-right with 4 states cannot reach state 3 within 3 frames
        let m = Hmm2Model::new_left_right(4, 1, 1).unwrap();
        let s = seq(&[0.0, 0.0, 0.0]);
        assert!(matches!(viterbi_decode(&m, &s), Err(Error::DecodeFailure)));
        assert!(matches!(forward(&m, &s), Err(Error::NumericFailure(_))));
    }

    #[test]
    fn short_sequence_rejected() {
        let m = single_state();
        assert!(matches!(viterbi_decode(&m, &seq(&[0.0])), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn two_frame_likelihood_is_prefix_of_joint() {
        let m = Hmm2Model::new_left_right(2, 1, 1).unwrap();
        let s = seq(&[0.3, -0.2]);
        let (_, ll) = forward(&m, &s).unwrap();
        // only path ending in final state 1: (0, 1)
        let expected = 0.5f64.ln() + m.log_emission(0, &[0.3]).unwrap() + m.log_emission(1, &[-0.2]).unwrap();
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn terminal_backward_column() {
        let m = Hmm2Model::new_left_right(3, 1, 1).unwrap();
        let beta = backward(&m, &seq(&[0.0, 1.0, 2.0, 3.0])).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if j == 2 { 0.0 } else { LOG_ZERO };
                assert_eq!(beta.get(3, i, j), expected);
            }
        }
    }

    #[test]
    fn path_log_joint_matches_viterbi() {
        let m = Hmm2Model::new_left_right(3, 1, 1).unwrap();
        let s = seq(&[0.0, 0.5, 1.0, -1.0, 0.2]);
        let path = viterbi_decode(&m, &s).unwrap();
        let lj = path_log_joint(&m, &s, &path.states).unwrap();
        assert!((lj - path.log_joint).abs() < 1e-12);
        assert_eq!(path_log_joint(&m, &s, &[0, 0, 0, 0, 0]).unwrap(), LOG_ZERO);
    }
}
