use std::collections::BTreeSet;

use proptest::prelude::*;

use dada_core::autodiff::{Tape, Tensor};
use dada_core::datagen::{from_csv_str, to_csv_string, DataSpec, DatasetPair, Scenario};
use dada_core::eval::{evaluate, open_set_metrics};
use dada_core::losses::{
    assemble, category_weights, grad_signs_source, loss_source_dada, loss_source_dada_p, loss_target_f_dada,
    loss_target_f_openset, CategoryWeights, LambdaPlacement, LossInputs, Objective, Sign,
};
use dada_core::model::{init_network, predict_category, DadaNetwork, ProbOutput};
use dada_core::trainer::{lambda_schedule, lr_schedule};

fn config() -> ProptestConfig {
    ProptestConfig { cases: 64, ..ProptestConfig::default() }
}

fn logits(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-4.0f64..4.0, cols), rows)
}

fn probs(tape: &mut Tape, z: &[Vec<f64>]) -> dada_core::autodiff::Var {
    let v = tape.param(Tensor::from_rows(z).unwrap());
    tape.softmax_rows(v).unwrap()
}

fn label_sets(pair: &DatasetPair) -> (BTreeSet<usize>, BTreeSet<usize>) {
    (pair.source_labels(), pair.target_labels())
}

fn grid(k: usize, n: usize, restrict_target: Option<Vec<usize>>, restrict_source: Option<Vec<usize>>) -> DataSpec {
    DataSpec::Grid { k, n_per_class: n, shift: [0.5, -0.3], spread: 0.3, restrict_target, restrict_source }
}

/// Nonempty proper subset of 1..=k, as 1-based labels.
fn subset(k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(1..=k, 1..k).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn closed_generators_keep_label_sets_equal(seed in 0u64..1000, n in 4usize..30, rot in 0.0f64..360.0) {
        let pair = DataSpec::TwoMoons { n_per_domain: n, rotation_deg: rot, noise_sd: 0.1 }.generate(seed).unwrap();
        prop_assert_eq!(pair.scenario, Scenario::Closed);
        pair.validate().unwrap();
        let (s, t) = label_sets(&pair);
        prop_assert_eq!(s, t);
        prop_assert!(pair.source.iter().all(|i| i.y.is_some()));
    }

    #[test]
    fn partial_restriction_keeps_target_inside_source((k, keep) in (3usize..7).prop_flat_map(|k| (Just(k), subset(k))), seed in 0u64..1000) {
        let pair = grid(k, 5, Some(keep.clone()), None).generate(seed).unwrap();
        prop_assert_eq!(pair.scenario, Scenario::Partial);
        pair.validate().unwrap();
        let (s, t) = label_sets(&pair);
        prop_assert!(t.is_subset(&s) && t.len() < s.len());
        let want: BTreeSet<usize> = keep.iter().map(|l| l - 1).collect();
        prop_assert_eq!(t, want);
    }

    #[test]
    fn open_restriction_keeps_source_inside_target((k, keep) in (3usize..7).prop_flat_map(|k| (Just(k), subset(k))), seed in 0u64..1000) {
        let pair = grid(k, 5, None, Some(keep.clone())).generate(seed).unwrap();
        prop_assert_eq!(pair.scenario, Scenario::Open);
        pair.validate().unwrap();
        let (s, t) = label_sets(&pair);
        prop_assert!(s.is_subset(&t) && s.len() < t.len());
        prop_assert_eq!(pair.unknown_class(), Some(keep.len()));
    }

    #[test]
    fn open_grid_has_one_unknown_class(known in 2usize..6, seed in 0u64..1000, ratio in 0.25f64..4.0) {
        let pair = DataSpec::OpenGrid { known, n_per_class: 8, unknown_ratio: ratio, shift: [0.0, 0.0], spread: 0.3 }
            .generate(seed)
            .unwrap();
        pair.validate().unwrap();
        let (s, t) = label_sets(&pair);
        prop_assert_eq!(s.len(), known);
        prop_assert_eq!(t.len(), known + 1);
        prop_assert!(s.is_subset(&t));
    }

    #[test]
    fn generators_are_pure_in_the_seed(seed in 0u64..1000, k in 2usize..6) {
        let spec = grid(k, 6, None, None);
        prop_assert_eq!(spec.generate(seed).unwrap(), spec.generate(seed).unwrap());
    }

    #[test]
    fn csv_round_trips(seed in 0u64..1000) {
        let pair = grid(4, 5, Some(vec![1, 3]), None).generate(seed).unwrap();
        let back = from_csv_str(&[&to_csv_string(&pair)]).unwrap();
        prop_assert_eq!(back.fingerprint(), pair.fingerprint());
        prop_assert_eq!(back, pair);
    }

    #[test]
    fn checkpoint_round_trips(seed in 0u64..1000, hidden in 1usize..8, k in 2usize..5) {
        let net = init_network(&[2, hidden], k, seed).unwrap();
        let back = DadaNetwork::from_checkpoint_str(&net.to_checkpoint_string()).unwrap();
        prop_assert_eq!(back, net);
    }

    #[test]
    fn predictions_ignore_the_domain_output(z in prop::collection::vec(-6.0f64..6.0, 3..8), d in -20.0f64..20.0) {
        let mut shifted = z.clone();
        *shifted.last_mut().unwrap() = d;
        let a = ProbOutput::from_logits(z);
        let b = ProbOutput::from_logits(shifted);
        prop_assert_eq!(predict_category(&a), predict_category(&b));
        let k = a.num_classes();
        prop_assert_eq!(a.p_bar[k], 0.0);
        for i in 0..k {
            prop_assert!((a.p_bar[i] - b.p_bar[i]).abs() < 1e-12);
            prop_assert!((b.p_bar[i] * (1.0 - b.p[k]) - b.p[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_is_bit_reproducible(z in logits(4, 4), labels in prop::collection::vec(0usize..3, 4)) {
        let run = || {
            let mut tape = Tape::new();
            let zv = tape.param(Tensor::from_rows(&z).unwrap());
            let p = tape.softmax_rows(zv).unwrap();
            let s = loss_source_dada(&mut tape, p, &labels).unwrap();
            let t = loss_target_f_dada(&mut tape, p).unwrap();
            let l = tape.add(s, t).unwrap();
            tape.backward(l).unwrap();
            tape.grad(zv).unwrap().to_vec()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn unit_weights_reproduce_the_source_loss(z in logits(5, 5), labels in prop::collection::vec(0usize..4, 5)) {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &z);
        let plain = loss_source_dada(&mut tape, p, &labels).unwrap();
        let ones = CategoryWeights { c_bar: vec![1.0; 4], c: vec![1.0; 4] };
        let weighted = loss_source_dada_p(&mut tape, p, &labels, &ones).unwrap();
        prop_assert_eq!(tape.value(plain).item().to_bits(), tape.value(weighted).item().to_bits());
    }

    #[test]
    fn openset_loss_tends_to_the_domain_term(z in logits(3, 5), q in 1e-6f64..1e-2) {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &z);
        let open = loss_target_f_openset(&mut tape, p, q).unwrap();
        let open = tape.value(open).item();
        let rows = tape.value(p).clone();
        let k = 4;
        let term: Vec<(f64, f64)> = rows.data().chunks(5).map(|r| (-r[k].ln(), -r[k - 1].ln())).collect();
        let domain = term.iter().map(|t| t.0).sum::<f64>() / 3.0;
        let unknown = term.iter().map(|t| t.1).sum::<f64>() / 3.0;
        // The gap is exactly q times the difference of the two log terms.
        let gap = open - domain;
        prop_assert!((gap - q * (unknown - domain)).abs() <= 1e-12 * (1.0 + open.abs()));
        prop_assert!(gap.abs() <= q * (unknown - domain).abs() + 1e-12);
    }

    #[test]
    fn category_weights_are_normalized(
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..20),
        lambda in 0.0f64..=1.0,
    ) {
        let p_bar: Vec<Vec<f64>> = rows.iter().map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|v| v / s).collect() }).collect();
        let w = category_weights(&p_bar, lambda).unwrap();
        let max = w.c_bar.iter().copied().fold(0.0, f64::max);
        prop_assert!((w.c_bar.iter().map(|v| v / max).fold(0.0, f64::max) - 1.0).abs() < 1e-15);
        for c in &w.c {
            prop_assert!(*c >= 1.0 - lambda - 1e-12 && *c <= 1.0 + 1e-12);
        }
        prop_assert!(w.c.iter().any(|c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn source_gradient_signs(p_y in 1e-6f64..(1.0 - 1e-6), frac in 0.0f64..1.0) {
        let p_d = (1.0 - p_y) * frac;
        prop_assume!(p_d > 0.0 && p_y + p_d < 1.0);
        let g = grad_signs_source(p_y, p_d).unwrap();
        prop_assert!(g.wrt_py <= 0.0);
        if (p_y - 0.5).abs() > 1e-9 {
            prop_assert_eq!(g.signs().1, Sign::of(p_y - 0.5));
        }
    }

    #[test]
    fn bundles_are_finite_and_recombine(
        zs in logits(3, 4),
        zt in logits(3, 4),
        labels in prop::collection::vec(0usize..3, 3),
        lambda in 0.0f64..=1.0,
    ) {
        for objective in [Objective::Dada, Objective::NoEm, Objective::DadaDc, Objective::DannCa, Objective::SourceOnly] {
            let mut tape = Tape::new();
            let ps = probs(&mut tape, &zs);
            let pt = probs(&mut tape, &zt);
            let inp = LossInputs { probs_s: ps, labels_s: &labels, probs_t: Some(pt), lambda, placement: LambdaPlacement::Joint, weights: None, q: None };
            let b = assemble(&mut tape, objective, &inp).unwrap();
            let v = b.values(&tape);
            prop_assert!(v.values().all(|x| x.is_finite()), "{objective}: {v:?}");
            if objective == Objective::Dada {
                let em = v["loss_em"];
                let want_f = lambda * (v["loss_s"] + v["loss_t_f"]) - em;
                let want_g = lambda * (v["loss_s"] + v["loss_t_g"]) - em;
                prop_assert!((v["loss_f"] - want_f).abs() <= 1e-12 * (1.0 + want_f.abs()));
                prop_assert!((v["loss_g"] - want_g).abs() <= 1e-12 * (1.0 + want_g.abs()));
            }
            if objective == Objective::NoEm {
                prop_assert!(!v.contains_key("loss_em"));
            }
        }
    }

    #[test]
    fn confusion_matches_counts_and_accuracy(seed in 0u64..500) {
        let pair = grid(3, 6, None, None).generate(seed).unwrap();
        let net = init_network(&[2, 6], 3, seed).unwrap();
        let x: Vec<Vec<f64>> = pair.target.iter().map(|i| i.x.clone()).collect();
        let y: Vec<Option<usize>> = pair.target.iter().map(|i| i.y).collect();
        let r = evaluate(&net, &x, &y, Scenario::Closed).unwrap();
        for (c, row) in r.confusion.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), y.iter().filter(|l| **l == Some(c)).count());
        }
        let trace: usize = (0..r.confusion.len()).map(|i| r.confusion[i][i]).sum();
        prop_assert_eq!(r.overall, trace as f64 / r.num_instances as f64);
    }

    #[test]
    fn open_set_scores_decompose(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        prop_assume!((0..4).all(|c| labels.contains(&c)));
        let m = open_set_metrics(&preds, &labels, 4).unwrap();
        let unk = m.unk_recall.unwrap();
        prop_assert!((m.os - (3.0 * m.os_star + unk) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn schedules_are_monotone_and_bounded(a in 0.0f64..=1.0, b in 0.0f64..=1.0, gamma in 0.1f64..20.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(lr_schedule(lo, 1e-4, 10.0, 0.75) >= lr_schedule(hi, 1e-4, 10.0, 0.75));
        prop_assert!(lambda_schedule(lo, gamma) <= lambda_schedule(hi, gamma));
        let l = lambda_schedule(hi, gamma);
        prop_assert!((0.0..1.0).contains(&l));
    }
}
