use mores_core::analysis::{
    attention_distribution, delta_y_probe, lmar, lmar_with, query_positions, read_trace_dump, traces_to_checkpoint,
    write_trace_dump, AlphaMode,
};
use mores_core::model::checkpoint::Checkpoint;
use mores_core::model::{AttentionTrace, ForwardOptions, Modality, Model, ModelConfig};
use mores_core::peft::{self, PeftConfig};
use mores_core::steering::{SteeringConfig, SteeringHook};
use mores_core::tasks::{self, TaskSpec};
use mores_core::Rng;
use proptest::prelude::*;
use Modality::*;

mod common;

use common::{brute_ratio, build, random_trace, uniform_trace};

#[test]
fn uniform_attention_gives_unit_ratio() {
    let traces: Vec<AttentionTrace> =
        [(1, 1, 1), (16, 4, 1), (3, 7, 2), (8, 2, 3)].iter().map(|&(v, t, o)| uniform_trace(v, t, o, 4, 4)).collect();
    let s = lmar(&traces).unwrap();
    assert_eq!(s.layers.len(), 4);
    for l in &s.layers {
        assert!((l.lmar - 1.0).abs() <= 1e-9, "{}", l.lmar);
        assert_eq!(l.n, 4);
    }
}

#[test]
fn hand_enumerated_example() {
    // One query (the last text token) with weights visual 0.4, 0.2 and text
    // 0.1, 0.1, 0.2: α_image = 0.3, α_text = 0.4/3, ratio 2.25.
    let t = vec![Visual, Visual, Text, Text, Text, Output];
    let tr = build(t, 1, 1, |q| {
        if q == 4 {
            vec![0.4, 0.2, 0.1, 0.1, 0.2]
        } else {
            vec![1.0 / (q + 1) as f64; q + 1]
        }
    });
    assert_eq!(query_positions(&tr.tags), vec![4]);
    // The decimal weights are not representable, so allow a few ulps.
    let got = lmar(&[tr]).unwrap().layers[0].lmar;
    assert!((got - 2.25).abs() <= 4.0 * f64::EPSILON * 2.25, "{got}");
}

#[test]
fn mean_of_ratios_matches_brute_force() {
    let mut rng = Rng::new(17);
    let traces: Vec<AttentionTrace> = (0..50).map(|i| random_trace(&mut rng, i)).collect();
    for (mode, per_token) in [(AlphaMode::PerToken, true), (AlphaMode::TotalMass, false)] {
        let s = lmar_with(&traces, mode).unwrap();
        for l in 0..3 {
            let ratios: Vec<f64> = traces.iter().filter_map(|t| brute_ratio(t, l, per_token)).collect();
            let want = ratios.iter().sum::<f64>() / ratios.len() as f64;
            assert!((s.layers[l].lmar - want).abs() <= 1e-12 * want.max(1.0), "{mode:?} layer {l}");
            // Mean of ratios, not ratio of means.
            let ratio_of_means = s.layers[l].alpha_image / s.layers[l].alpha_text;
            assert!((ratio_of_means - want).abs() > 1e-9);
        }
    }
}

#[test]
fn zero_text_attention_is_excluded_and_counted() {
    let t = vec![System, Visual, Text, Output];
    let blind = build(t.clone(), 1, 1, |q| {
        let mut r = vec![0.0; q + 1];
        r[0] = 1.0;
        r
    });
    let uniform = build(t, 1, 1, |q| vec![1.0 / (q + 1) as f64; q + 1]);
    let s = lmar(&[blind.clone(), uniform]).unwrap();
    assert_eq!((s.layers[0].n, s.layers[0].excluded), (1, 1));
    assert!((s.layers[0].lmar - 1.0).abs() < 1e-12);
    assert!(lmar(&[blind]).unwrap().layers[0].lmar.is_nan());
}

#[test]
fn traces_without_a_modality_are_errors() {
    let no_text = uniform_trace(3, 0, 1, 1, 1);
    assert!(lmar(&[no_text]).is_err());
    let no_visual = uniform_trace(0, 3, 1, 1, 1);
    assert!(lmar(&[no_visual]).is_err());
    assert!(lmar(&[]).is_err());
}

#[test]
fn share_distribution_is_consistent() {
    let mut rng = Rng::new(3);
    let traces: Vec<AttentionTrace> = (0..30).map(|i| random_trace(&mut rng, i)).collect();
    let dist = attention_distribution(&traces).unwrap();
    let s = lmar(&traces).unwrap();
    for (d, l) in dist.iter().zip(&s.layers) {
        assert_eq!(d.shares.len(), 30);
        assert!(d.min <= d.q25 && d.q25 <= d.median && d.median <= d.q75 && d.q75 <= d.max);
        assert!(d.shares.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!((d.mean - l.visual_share_mean).abs() < 1e-12);
    }
}

#[test]
fn dump_lines_cover_every_query_and_sum_to_one() {
    let mut rng = Rng::new(8);
    let traces: Vec<AttentionTrace> = (0..5).map(|i| random_trace(&mut rng, i)).collect();
    let mut buf = Vec::new();
    write_trace_dump(&traces, &mut buf).unwrap();
    let recs = read_trace_dump(std::str::from_utf8(&buf).unwrap()).unwrap();
    let expected: usize = traces.iter().map(|t| query_positions(&t.tags).len() * 3 * 2).sum();
    assert_eq!(recs.len(), expected);
    for r in &recs {
        let tr = &traces[r.sample_id];
        assert_eq!(tr.tags[r.query_pos + 1], Output);
        assert!((r.system + r.text + r.visual + r.output - 1.0).abs() < 1e-12);
    }
    assert!(read_trace_dump("{not json").is_err());
}

#[test]
fn trace_checkpoint_round_trips() {
    let mut rng = Rng::new(4);
    let traces: Vec<AttentionTrace> = (0..6).map(|i| random_trace(&mut rng, i)).collect();
    let ck = traces_to_checkpoint(&traces).unwrap();
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back, ck);
    let n = traces.iter().map(AttentionTrace::len).max().unwrap();
    let rec = back.get("trace.layer2.head1").unwrap();
    for (s, tr) in traces.iter().enumerate() {
        let len = tr.len();
        for q in 0..len {
            let stored = &rec.data[s * n * n + q * n..s * n * n + q * n + len];
            assert_eq!(stored, tr.row(2, 1, q));
        }
    }
}

proptest! {
    #[test]
    fn lmar_ignores_sample_order(seed in any::<u64>(), rot in 0usize..10) {
        let mut rng = Rng::new(seed);
        let mut traces: Vec<AttentionTrace> = (0..10).map(|i| random_trace(&mut rng, i)).collect();
        let a = lmar(&traces).unwrap().lmar();
        traces.rotate_left(rot);
        let b = lmar(&traces).unwrap().lmar();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        }
    }

    #[test]
    fn per_token_ratio_is_nonnegative(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let traces: Vec<AttentionTrace> = (0..4).map(|i| random_trace(&mut rng, i)).collect();
        for l in lmar(&traces).unwrap().layers {
            prop_assert!(l.lmar >= 0.0 && l.lmar.is_finite());
        }
    }
}

fn steered_model(seed: u64) -> (Model<f64>, SteeringHook) {
    let mut rng = Rng::new(seed);
    let mut model = Model::<f64>::new(ModelConfig::desk(), &mut rng).unwrap();
    let cfg = PeftConfig::mores(SteeringConfig::default());
    peft::install(&mut model.params, &model.config, &cfg, &mut rng).unwrap();
    (model, SteeringHook::new(cfg.steering, 4).unwrap())
}

fn needle_prompts(n: usize) -> Vec<mores_core::model::TokenizedMultimodalSequence> {
    let spec = TaskSpec { train: 0, eval: n, distractors: 2, ..TaskSpec::default() };
    tasks::generate(&spec).unwrap().eval.into_iter().map(|s| s.sequence).collect()
}

#[test]
fn delta_y_vanishes_at_init() {
    let (model, hook) = steered_model(1);
    let mut rng = Rng::new(2);
    for seq in needle_prompts(10) {
        let r = delta_y_probe(&model, &hook, &seq, &mut rng).unwrap();
        assert_eq!(r.delta_y_norm, 0.0);
        assert_eq!(r.delta_c_norm, 0.0);
        assert_eq!(r.norm_ratio, 1.0);
        assert!(r.bound_satisfied);
    }
}

#[test]
fn delta_y_respects_the_operator_norm_bound() {
    let (mut model, hook) = steered_model(3);
    let mut rng = Rng::new(4);
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".M") || name.ends_with(".b") {
            for x in t.data_mut() {
                *x += 0.5 * rng.normal();
            }
        }
    }
    for seq in needle_prompts(20) {
        let r = delta_y_probe(&model, &hook, &seq, &mut rng).unwrap();
        assert!(r.delta_c_norm > 0.0);
        assert!(r.bound_satisfied, "{r:?}");
        assert!(r.lipschitz_estimate.is_finite() && r.lipschitz_estimate > 0.0);
    }
}

#[test]
fn traces_of_a_real_model_fall_in_range() {
    let mut rng = Rng::new(5);
    let model = Model::<f64>::new(ModelConfig::desk(), &mut rng).unwrap();
    let traces: Vec<AttentionTrace> = needle_prompts(20)
        .iter()
        .map(|s| model.forward(s, &ForwardOptions::default(), true).unwrap().trace.unwrap())
        .collect();
    let s = lmar(&traces).unwrap();
    for l in &s.layers {
        assert!(l.lmar > 0.0 && l.lmar.is_finite());
        assert!((0.0..=1.0).contains(&l.visual_share_mean));
        assert_eq!(l.n + l.excluded, 20);
    }
}
