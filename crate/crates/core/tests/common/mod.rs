#![allow(dead_code)]

use hmm2kit::model::{Hmm2Parts, left_right_topology};
use hmm2kit::{CovarianceMode, GaussianComponent, GaussianMixture, Hmm2Model, ObservationSequence};
use rand::Rng;

/// Left-right model with one diagonal Gaussian per state: stay with
/// probability `stay`, else advance; the last state loops.
pub fn lr_model(means: &[Vec<f64>], var: f64, stay: f64) -> Hmm2Model {
    let n = means.len();
    let topology = left_right_topology(n);
    let mut transitions = vec![0.0; n * n * n];
    let mut first = vec![0.0; n * n];
    for j in 0..n {
        let (s, a) = if j + 1 == n { (1.0, 0.0) } else { (stay, 1.0 - stay) };
        first[j * n + j] = s;
        if j + 1 < n {
            first[j * n + j + 1] = a;
        }
        for i in 0..n {
            transitions[(i * n + j) * n + j] = s;
            if j + 1 < n {
                transitions[(i * n + j) * n + j + 1] = a;
            }
        }
    }
    let mut initial = vec![0.0; n];
    initial[0] = 1.0;
    let emissions = means
        .iter()
        .map(|m| GaussianMixture::single(GaussianComponent::diagonal(m.clone(), &vec![var; m.len()]).unwrap()))
        .collect();
    Hmm2Model::from_parts(Hmm2Parts {
        initial,
        first_transitions: first,
        transitions,
        emissions,
        topology,
        final_states: vec![n - 1],
    })
    .unwrap()
}

fn random_row<R: Rng>(rng: &mut R, allowed: &[bool]) -> Vec<f64> {
    let raw: Vec<f64> = allowed
        .iter()
        .map(|&a| if a { 0.05 + rng.random::<f64>() } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        raw
    } else {
        raw.iter().map(|v| v / total).collect()
    }
}

/// Random valid model with a sparse mask, one diagonal Gaussian per state
/// and a random nonempty final set.
pub fn random_model<R: Rng>(rng: &mut R, n: usize, d: usize) -> Hmm2Model {
    let mut topology = vec![false; n * n * n];
    for row in 0..n * n {
        for k in 0..n {
            topology[row * n + k] = rng.random::<f64>() < 0.75;
        }
        // keep every row alive so most sequences have support
        let k = rng.random_range(0..n);
        topology[row * n + k] = true;
    }
    let transitions: Vec<f64> = (0..n * n)
        .flat_map(|row| random_row(rng, &topology[row * n..(row + 1) * n]))
        .collect();
    let mut first = Vec::with_capacity(n * n);
    for j in 0..n {
        let allowed: Vec<bool> = (0..n).map(|k| (0..n).any(|i| topology[(i * n + j) * n + k])).collect();
        first.extend(random_row(rng, &allowed));
    }
    let initial = random_row(rng, &vec![true; n]);
    let emissions = (0..n)
        .map(|_| {
            let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..2.0)).collect();
            GaussianMixture::single(GaussianComponent::diagonal(mean, &var).unwrap())
        })
        .collect();
    let mut final_states: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < 0.6).collect();
    if final_states.is_empty() {
        final_states.push(rng.random_range(0..n));
    }
    Hmm2Model::from_parts(Hmm2Parts {
        initial,
        first_transitions: first,
        transitions,
        emissions,
        topology,
        final_states,
    })
    .unwrap()
}

pub fn random_seq<R: Rng>(rng: &mut R, len: usize, d: usize) -> ObservationSequence {
    ObservationSequence::from_frames(
        (0..len)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect(),
    )
    .unwrap()
}

/// Diagonal or full Gaussian log density straight from the formula.
pub fn oracle_log_gauss(c: &GaussianComponent, x: &[f64]) -> f64 {
    let d = x.len();
    let cov = c.covariance();
    let mu = c.mean();
    match c.mode() {
        CovarianceMode::Diagonal => (0..d)
            .map(|i| {
                let v = cov[i * d + i];
                let z = x[i] - mu[i];
                -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + z * z / v)
            })
            .sum(),
        CovarianceMode::Full => {
            let m = nalgebra::DMatrix::from_row_slice(d, d, cov);
            let inv = m.clone().try_inverse().unwrap();
            let z = nalgebra::DVector::from_iterator(d, x.iter().zip(mu).map(|(a, b)| a - b));
            let q = (z.transpose() * inv * &z)[(0, 0)];
            -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + m.determinant().ln() + q)
        }
    }
}

pub fn oracle_log_emission(m: &Hmm2Model, s: usize, x: &[f64]) -> f64 {
    let mix = &m.emissions()[s];
    let terms: Vec<f64> = mix
        .components()
        .iter()
        .zip(mix.weights())
        .map(|(c, w)| w.ln() + oracle_log_gauss(c, x))
        .collect();
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
}

/// Joint log probability of one path, multiplied out term by term.
pub fn oracle_path_log_joint(m: &Hmm2Model, seq: &ObservationSequence, q: &[usize]) -> f64 {
    let mut lp = m.initial()[q[0]].ln() + oracle_log_emission(m, q[0], seq.frame(0));
    if q.len() > 1 {
        lp += m.first_transition(q[0], q[1]).ln() + oracle_log_emission(m, q[1], seq.frame(1));
    }
    for t in 2..q.len() {
        lp += m.transition(q[t - 2], q[t - 1], q[t]).ln() + oracle_log_emission(m, q[t], seq.frame(t));
    }
    lp
}

/// Every path in lexicographic order.
pub fn all_paths(n: usize, len: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = n.pow(len as u32);
    (0..total).map(move |mut code| {
        let mut q = vec![0; len];
        for t in (0..len).rev() {
            q[t] = code % n;
            code /= n;
        }
        q
    })
}

/// Exhaustive likelihood and best path over paths ending in a final state.
pub fn brute_force(m: &Hmm2Model, seq: &ObservationSequence) -> (f64, Option<(Vec<usize>, f64)>) {
    let n = m.num_states();
    let mut terms = Vec::new();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for q in all_paths(n, seq.len()) {
        if !m.is_final(*q.last().unwrap()) {
            continue;
        }
        let lp = oracle_path_log_joint(m, seq, &q);
        if lp == f64::NEG_INFINITY {
            continue;
        }
        terms.push(lp);
        if best.as_ref().is_none_or(|(_, b)| lp > *b) {
            best = Some((q, lp));
        }
    }
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ll = if mx == f64::NEG_INFINITY {
        mx
    } else {
        mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
    };
    (ll, best)
}
