mod common;

use std::collections::BTreeMap;

use common::lr_model;
use hmm2kit::grammar::{compose, decode_run, learn_grammar_weights, parse_grammar, CompositeModel};
use hmm2kit::training::TrainingConfig;
use hmm2kit::{Error, Hmm2Model, ObservationSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALTERNATING: &str = "\
# corridor connects doors
NODE corridor corridor
NODE doorL doorL
START corridor
END corridor
EDGE corridor doorL 1.0
EDGE doorL corridor 1.0
";

fn models(pairs: &[(&str, Hmm2Model)]) -> BTreeMap<String, Hmm2Model> {
    pairs.iter().map(|(k, m)| (k.to_string(), m.clone())).collect()
}

fn corridor() -> Hmm2Model {
    lr_model(&[vec![0.0], vec![0.0], vec![0.0]], 1.0, 0.9)
}

fn door(level: f64) -> Hmm2Model {
    lr_model(&[vec![level], vec![level * 1.2], vec![level]], 1.0, 0.7)
}

fn frame_labels(c: &CompositeModel, states: &[usize]) -> Vec<String> {
    states.iter().map(|&s| c.label_of(s).to_string()).collect()
}

fn expand(segments: &[hmm2kit::grammar::Segment]) -> Vec<String> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.label.clone(), s.len()))
        .collect()
}

/// Sample runs of `len` frames from the composite that end in a final state.
fn sample_runs(c: &CompositeModel, count: usize, len: usize, seed: u64) -> Vec<(Vec<usize>, ObservationSequence)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let (states, seq) = c.merged.sample(&mut rng, len).unwrap();
        if c.merged.is_final(*states.last().unwrap()) {
            out.push((states, seq));
        }
    }
    out
}

#[test]
fn parses_alternating_grammar() {
    let g = parse_grammar(ALTERNATING).unwrap();
    assert_eq!(g.nodes.len(), 2);
    assert_eq!(g.edges.len(), 2);
    assert_eq!(g.start, vec![("corridor".to_string(), 1.0)]);
    assert_eq!(g.end, vec!["corridor".to_string()]);
    assert_eq!(parse_grammar(&g.to_text()).unwrap(), g);
}

#[test]
fn unnormalized_edges_rejected() {
    let text = "NODE a a\nNODE b b\nNODE c c\nSTART a\nEND a\nEDGE a b 0.6\nEDGE a c 0.3\nEDGE b a\nEDGE c a\n";
    assert!(matches!(parse_grammar(text), Err(Error::Normalization { .. })));
}

#[test]
fn undeclared_node_rejected() {
    let text = format!("{ALTERNATING}EDGE corridor doorR\n").replace("EDGE corridor doorL 1.0\n", "EDGE corridor doorL\n");
    assert!(matches!(parse_grammar(&text), Err(Error::UnknownReference(_))));
}

#[test]
fn unspecified_edges_share_mass() {
    let text = "NODE a a\nNODE b b\nNODE c c\nSTART a\nEND a\nEDGE a b 0.5\nEDGE a c\nEDGE a a\nEDGE b a\nEDGE c a\n";
    let g = parse_grammar(text).unwrap();
    let p: Vec<f64> = g.outgoing("a").map(|e| e.probability).collect();
    assert_eq!(p, vec![0.5, 0.25, 0.25]);
}

#[test]
fn composite_structure() {
    let g = parse_grammar("NODE A A\nNODE B B\nSTART A\nEND B\nEDGE A B\nEDGE B A\n").unwrap();
    let c = compose(&g, &models(&[("A", corridor()), ("B", door(5.0))])).unwrap();
    let n = c.merged.num_states();
    assert_eq!(n, 6);
    let labels: Vec<&str> = (0..6).map(|s| c.label_of(s)).collect();
    assert_eq!(labels, vec!["A", "A", "A", "B", "B", "B"]);
    assert_eq!(c.merged.final_states(), &[5]);
    for i in 0..n {
        for j in 0..n {
            let sum: f64 = (0..n).map(|k| c.merged.transition(i, j, k)).sum();
            let any = (0..n).any(|k| c.merged.allowed(i, j, k));
            if any {
                assert!((sum - 1.0).abs() < 1e-9, "row ({i},{j}) sums to {sum}");
            }
        }
    }
    // cross links only from the last state of one block to the first of the next
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if c.merged.transition(i, j, k) > 0.0 && c.label_of(j) != c.label_of(k) {
                    assert!((j == 2 && k == 3) || (j == 5 && k == 0), "({i},{j},{k})");
                }
            }
        }
    }
    // interior rows inside a block are the source model's
    let src = corridor();
    for (i, j, k) in [(0, 0, 0), (0, 0, 1), (0, 1, 1), (1, 1, 2)] {
        assert!((c.merged.transition(i, j, k) - src.transition(i, j, k)).abs() < 1e-12);
    }
    assert_eq!(c.merged.emissions()[4], door(5.0).emissions()[1]);
}

#[test]
fn indoor_shape_has_ten_blocks() {
    let places = ["doorL", "doorR", "openL", "openR", "crossT", "crossX", "endL", "endR", "turn"];
    let mut text = String::from("NODE corridor corridor\nSTART corridor\nEND corridor\n");
    let mut ms = vec![("corridor", corridor())];
    for (i, p) in places.iter().enumerate() {
        text.push_str(&format!("NODE {p} {p}\nEDGE corridor {p}\nEDGE {p} corridor\n"));
        ms.push((p, door(4.0 + i as f64)));
    }
    let g = parse_grammar(&text).unwrap();
    assert_eq!(g.outgoing("corridor").count(), 9);
    let c = compose(&g, &models(&ms)).unwrap();
    assert_eq!(c.blocks.len(), 10);
    assert_eq!(c.merged.num_states(), 30);
}

#[test]
fn missing_model_is_unknown_reference() {
    let g = parse_grammar(ALTERNATING).unwrap();
    let err = compose(&g, &models(&[("corridor", corridor())])).unwrap_err();
    assert!(matches!(err, Error::UnknownReference(_)), "{err}");
}

#[test]
fn planted_door_is_found() {
    let g = parse_grammar(ALTERNATING).unwrap();
    let c = compose(&g, &models(&[("corridor", corridor()), ("doorL", door(10.0))])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = rand_distr::Normal::new(0.0, 1.0).unwrap();
    use rand::Rng;
    let mut frames = Vec::new();
    for t in 0..92 {
        let level = if (40..52).contains(&t) { 10.0 } else { 0.0 };
        frames.push(vec![level + rng.sample(noise)]);
    }
    let fs = decode_run(&c, &ObservationSequence::from_frames(frames).unwrap()).unwrap();
    assert_eq!(fs.labels(), vec!["corridor", "doorL", "corridor"]);
    assert!(fs.segments[1].start.abs_diff(40) <= 3, "{:?}", fs.segments);
    assert!(fs.segments[1].end.abs_diff(52) <= 3, "{:?}", fs.segments);
    assert_eq!(fs.segments.last().unwrap().end, 92);
}

#[test]
fn pure_corridor_run_is_one_segment() {
    let g = parse_grammar(ALTERNATING).unwrap();
    let c = compose(&g, &models(&[("corridor", corridor()), ("doorL", door(10.0))])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (_, seq) = corridor().sample(&mut rng, 60).unwrap();
    let fs = decode_run(&c, &seq).unwrap();
    assert_eq!(fs.labels(), vec!["corridor"]);
    assert_eq!((fs.segments[0].start, fs.segments[0].end), (0, 60));
}

#[test]
fn decoding_runs_sampled_from_the_composite() {
    let g = parse_grammar(
        "NODE corridor corridor\nNODE doorL doorL\nNODE doorR doorR\nSTART corridor\nEND corridor\n\
         EDGE corridor doorL\nEDGE corridor doorR\nEDGE doorL corridor\nEDGE doorR corridor\n",
    )
    .unwrap();
    let c = compose(
        &g,
        &models(&[("corridor", corridor()), ("doorL", door(8.0)), ("doorR", door(-8.0))]),
    )
    .unwrap();
    let mut agree = 0;
    let mut total = 0;
    for (states, seq) in sample_runs(&c, 20, 80, 21) {
        let truth = frame_labels(&c, &states);
        let fs = decode_run(&c, &seq).unwrap();
        let hyp = expand(&fs.segments);
        assert_eq!(hyp.len(), truth.len());
        agree += truth.iter().zip(&hyp).filter(|(a, b)| a == b).count();
        total += truth.len();
    }
    let rate = agree as f64 / total as f64;
    assert!(rate >= 0.95, "frame agreement {rate}");
}

fn door_grammar(left: f64) -> String {
    format!(
        "NODE corridor corridor\nNODE doorL doorL\nNODE doorR doorR\nSTART corridor\nEND corridor\n\
         EDGE corridor doorL {left}\nEDGE corridor doorR {}\nEDGE doorL corridor\nEDGE doorR corridor\n",
        1.0 - left
    )
}

fn door_models() -> BTreeMap<String, Hmm2Model> {
    models(&[("corridor", corridor()), ("doorL", door(8.0)), ("doorR", door(-8.0))])
}

#[test]
fn learned_edge_weights_recover_truth() {
    let truth = compose(&parse_grammar(&door_grammar(0.7)).unwrap(), &door_models()).unwrap();
    let runs: Vec<ObservationSequence> = sample_runs(&truth, 100, 120, 99).into_iter().map(|(_, s)| s).collect();
    let start = compose(&parse_grammar(&door_grammar(0.5)).unwrap(), &door_models()).unwrap();
    let learned = learn_grammar_weights(&start, &runs, &TrainingConfig { max_iterations: 30, ..Default::default() }).unwrap();
    let p = learned
        .edges
        .iter()
        .find(|e| e.from == "corridor" && e.to == "doorL")
        .unwrap()
        .probability;
    assert!((p - 0.7).abs() < 0.1, "learned {p}");

    // feature models are untouched
    let recomposed = compose(&learned, start.source_models()).unwrap();
    assert_eq!(recomposed.merged.emissions(), start.merged.emissions());
    assert_eq!(start.source_models(), &door_models());
}

#[test]
fn untraversed_edge_falls_to_floor() {
    let only_left = compose(&parse_grammar(&door_grammar(1.0 - 1e-12)).unwrap(), &door_models()).unwrap();
    let runs: Vec<ObservationSequence> = sample_runs(&only_left, 40, 100, 4).into_iter().map(|(_, s)| s).collect();
    let start = compose(&parse_grammar(&door_grammar(0.5)).unwrap(), &door_models()).unwrap();
    let learned = learn_grammar_weights(&start, &runs, &TrainingConfig { max_iterations: 20, ..Default::default() }).unwrap();
    let out: Vec<f64> = learned.outgoing("corridor").map(|e| e.probability).collect();
    assert!(out[1] < 0.01, "{out:?}");
    assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
