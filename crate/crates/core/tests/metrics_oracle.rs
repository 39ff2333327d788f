mod support;

use std::collections::BTreeSet;

use proptest::prelude::*;
use relbias_core::adjust::{AdjustmentSpec, Branch};
use relbias_core::ensemble::{ensemble_probs, single_branch};
use relbias_core::metrics::{
    classification_acc, evaluate, recall_at_k, scenes, split_report, GraphConstraint, Predictions,
    Split, SplitOptions,
};
use relbias_core::synth::{generate, Regime, SynthModel, SynthParams};
use relbias_core::{Dataset, RelationLabelSpace, RelationSample, Triplet};
use support::{exhaustive_recall, OraclePair};

#[derive(Debug, Clone)]
struct Instance {
    k: usize,
    pairs: Vec<OraclePair>,
}

impl Instance {
    fn dataset(&self) -> Dataset {
        let samples = self
            .pairs
            .iter()
            .map(|p| RelationSample {
                sample_id: p.sample_id.clone(),
                image_id: p.image_id.clone(),
                subject_class: 0,
                object_class: 1,
                gt_label: p.gt_label,
                zs_logits: vec![0.0; self.k],
                sg_logits: vec![0.0; self.k + 1],
            })
            .collect();
        Dataset::new(
            RelationLabelSpace::new(self.k, None).unwrap(),
            samples,
            None,
        )
        .unwrap()
    }

    fn predictions(&self) -> Predictions {
        let mut p = Predictions::new(self.k);
        for pair in &self.pairs {
            p.insert(&pair.sample_id, pair.full.clone()).unwrap();
        }
        p
    }
}

/// Up to 5 images with up to 8 pairs each; scores on a coarse lattice so
/// ties are common.
fn arb_instance() -> impl Strategy<Value = Instance> {
    (2usize..=4).prop_flat_map(|k| {
        let pair = (0..=k, prop::collection::vec(0u8..=4, k + 1));
        let image = prop::collection::vec(pair, 1..=8);
        prop::collection::vec(image, 1..=5).prop_map(move |images| {
            let mut pairs = Vec::new();
            for (i, members) in images.into_iter().enumerate() {
                for (j, (label, scores)) in members.into_iter().enumerate() {
                    pairs.push(OraclePair {
                        sample_id: format!("i{i}p{j}"),
                        image_id: format!("img{i}"),
                        gt_label: label,
                        full: scores.iter().map(|s| f64::from(*s) / 4.0).collect(),
                    });
                }
            }
            Instance { k, pairs }
        })
    })
}

const CUTOFFS: [usize; 4] = [1, 2, 5, 100];

fn has_gt(inst: &Instance) -> bool {
    inst.pairs.iter().any(|p| p.gt_label > 0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn recall_matches_the_exhaustive_reference(inst in arb_instance(), graph in any::<bool>()) {
        prop_assume!(has_gt(&inst));
        let mode = if graph { GraphConstraint::On } else { GraphConstraint::Off };
        let got = recall_at_k(&inst.predictions(), &scenes(&inst.dataset(), |_| true), &CUTOFFS, mode).unwrap();
        let (recall, mrecall) = exhaustive_recall(&inst.pairs, inst.k, &CUTOFFS, graph);
        prop_assert_eq!(got.recall_at, recall);
        prop_assert_eq!(got.mrecall_at, mrecall);
    }

    #[test]
    fn recall_grows_with_the_cutoff(inst in arb_instance()) {
        prop_assume!(has_gt(&inst));
        let cutoffs: Vec<usize> = (1..=10).collect();
        let r = recall_at_k(&inst.predictions(), &scenes(&inst.dataset(), |_| true), &cutoffs, GraphConstraint::On).unwrap();
        for w in cutoffs.windows(2) {
            prop_assert!(r.recall_at[&w[1]] >= r.recall_at[&w[0]]);
        }
    }

    #[test]
    fn sample_order_does_not_matter(inst in arb_instance(), rotate in 0usize..40) {
        prop_assume!(has_gt(&inst));
        let mut shuffled = inst.clone();
        let n = shuffled.pairs.len();
        shuffled.pairs.rotate_left(rotate % n);
        shuffled.pairs.reverse();
        let a = evaluate(&inst.predictions(), &inst.dataset(), &CUTOFFS, GraphConstraint::On).unwrap();
        let b = evaluate(&shuffled.predictions(), &shuffled.dataset(), &CUTOFFS, GraphConstraint::On).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mean_recall_is_the_mean_of_class_recalls(inst in arb_instance()) {
        prop_assume!(has_gt(&inst));
        let r = evaluate(&inst.predictions(), &inst.dataset(), &CUTOFFS, GraphConstraint::On).unwrap();
        r.validate().unwrap();
        for c in CUTOFFS {
            let present: Vec<f64> = r.per_class_recall[&c].iter().flatten().copied().collect();
            let mean = present.iter().sum::<f64>() / present.len() as f64;
            prop_assert_eq!(r.mrecall_at[&c], mean);
        }
    }
}

fn pair(id: &str, img: &str, label: usize, full: Vec<f64>) -> OraclePair {
    OraclePair {
        sample_id: id.into(),
        image_id: img.into(),
        gt_label: label,
        full,
    }
}

#[test]
fn hand_ranking_example() {
    // GT {(A,1),(B,2)}; candidates A:(1,0.9), B:(3,0.8), C:(2,0.7).
    let inst = Instance {
        k: 3,
        pairs: vec![
            pair("A", "img", 1, vec![0.0, 0.9, 0.05, 0.05]),
            pair("B", "img", 2, vec![0.0, 0.1, 0.1, 0.8]),
            pair("C", "img", 0, vec![0.0, 0.1, 0.7, 0.2]),
        ],
    };
    let r = recall_at_k(
        &inst.predictions(),
        &scenes(&inst.dataset(), |_| true),
        &[2],
        GraphConstraint::On,
    )
    .unwrap();
    assert_eq!(r.recall_at[&2], 0.5);
}

#[test]
fn perfect_predictions_recall_everything() {
    let inst = Instance {
        k: 2,
        pairs: vec![
            pair("a", "x", 1, vec![0.0, 1.0, 0.0]),
            pair("b", "x", 2, vec![0.0, 0.0, 1.0]),
            pair("c", "y", 2, vec![0.0, 0.0, 1.0]),
        ],
    };
    let r = evaluate(
        &inst.predictions(),
        &inst.dataset(),
        &[2, 5],
        GraphConstraint::On,
    )
    .unwrap();
    assert_eq!(r.recall_at[&2], 1.0);
    assert_eq!(r.mrecall_at[&5], 1.0);
    assert_eq!((r.acc, r.macc), (1.0, 1.0));
}

#[test]
fn four_sample_class_balance_fixture() {
    let inst = Instance {
        k: 2,
        pairs: vec![
            pair("a", "x", 1, vec![0.0, 0.9, 0.1]),
            pair("b", "x", 1, vec![0.0, 0.8, 0.2]),
            pair("c", "x", 1, vec![0.0, 0.7, 0.3]),
            pair("d", "x", 2, vec![0.0, 0.6, 0.4]),
        ],
    };
    let r = evaluate(
        &inst.predictions(),
        &inst.dataset(),
        &[100],
        GraphConstraint::On,
    )
    .unwrap();
    assert_eq!(r.mrecall_at[&100], 0.5);
    assert_eq!(r.recall_at[&100], 0.75);
}

#[test]
fn accuracy_fixture() {
    let inst = Instance {
        k: 2,
        pairs: vec![
            pair("a", "x", 1, vec![0.0, 0.9, 0.1]),
            pair("b", "x", 2, vec![0.0, 0.9, 0.1]),
            pair("c", "x", 2, vec![0.0, 0.1, 0.9]),
        ],
    };
    let acc = classification_acc(&inst.predictions(), &inst.dataset(), |_| true).unwrap();
    assert!((acc.acc - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(acc.per_class, vec![Some(1.0), Some(0.5)]);
    assert_eq!(acc.macc, 0.75);
}

#[test]
fn uniform_singletons_make_mean_recall_equal_recall() {
    // One GT relation per image, two images per class.
    let mut pairs = Vec::new();
    for (i, label) in [1, 1, 2, 2, 3, 3].iter().enumerate() {
        let img = format!("img{i}");
        let mut full = vec![0.0, 0.2, 0.3, 0.5];
        full.swap(1 + i % 3, 3);
        pairs.push(pair(&format!("g{i}"), &img, *label, full));
        pairs.push(pair(&format!("n{i}"), &img, 0, vec![0.0, 0.4, 0.35, 0.25]));
    }
    let inst = Instance { k: 3, pairs };
    let r = evaluate(
        &inst.predictions(),
        &inst.dataset(),
        &[1, 2],
        GraphConstraint::On,
    )
    .unwrap();
    for c in [1, 2] {
        assert!((r.mrecall_at[&c] - r.recall_at[&c]).abs() < 1e-15);
    }
}

fn with_inventory(ds: &Dataset, inv: BTreeSet<Triplet>) -> Dataset {
    ds.clone().with_inventory(Some(inv))
}

#[test]
fn split_edge_cases() {
    let inst = Instance {
        k: 2,
        pairs: vec![
            pair("a", "x", 1, vec![0.1, 0.6, 0.3]),
            pair("b", "x", 2, vec![0.1, 0.6, 0.3]),
            pair("c", "y", 0, vec![0.1, 0.3, 0.6]),
        ],
    };
    let preds = inst.predictions();
    let mut opts = SplitOptions::new(vec![1, 2]);
    opts.splits = vec![Split::All, Split::Seen, Split::Unseen];

    let empty = with_inventory(&inst.dataset(), BTreeSet::new());
    let r = split_report(&preds, &empty, &opts).unwrap();
    let unseen = r.splits[&Split::Unseen].report.clone().unwrap();
    let all = r.splits[&Split::All].report.clone().unwrap();
    assert_eq!(unseen, all);
    assert_eq!(r.splits[&Split::Seen].count, 0);
    assert!(r.splits[&Split::Seen].report.is_none());

    let full: BTreeSet<Triplet> = inst
        .dataset()
        .samples()
        .iter()
        .map(|s| s.triplet())
        .collect();
    let r = split_report(&preds, &with_inventory(&inst.dataset(), full), &opts).unwrap();
    assert_eq!(r.splits[&Split::Unseen].count, 0);
    assert!(r.splits[&Split::Unseen].report.is_none());
    let json = serde_json::to_value(&r).unwrap();
    assert!(json["splits"]["unseen"]["report"].is_null());

    assert!(split_report(&preds, &inst.dataset(), &opts).is_err());
}

#[test]
fn frequency_buckets_cover_every_class_once() {
    let model = SynthModel::new(SynthParams::standard(50, 0).unwrap()).unwrap();
    let ds = generate(&model, 20_000, Regime::Target).unwrap().dataset;
    let mut preds = Predictions::new(50);
    for s in ds.samples() {
        let mut full = vec![0.0];
        full.extend(relbias_core::math::softmax(&s.zs_logits));
        preds.insert(&s.sample_id, full).unwrap();
    }
    let mut opts = SplitOptions::new(vec![50, 100]);
    opts.splits = vec![Split::Frequent, Split::Medium, Split::Rare];
    opts.class_counts = Some(model.sgg_prior().probs().to_vec());
    let r = split_report(&preds, &ds, &opts).unwrap();
    r.validate().unwrap();
    let count = |s: Split| r.splits[&s].count;
    assert_eq!(
        count(Split::Frequent) + count(Split::Medium) + count(Split::Rare),
        r.count
    );
    let classes = |s: Split| {
        r.splits[&s]
            .report
            .as_ref()
            .unwrap()
            .per_class_acc
            .iter()
            .filter(|c| c.is_some())
            .count()
    };
    assert_eq!(
        (
            classes(Split::Frequent),
            classes(Split::Medium),
            classes(Split::Rare)
        ),
        (15, 20, 15)
    );
}

#[test]
fn unseen_triplets_are_harder_and_gain_more_from_ensembling() {
    let model = SynthModel::new(SynthParams::standard(50, 0).unwrap()).unwrap();
    let ds = generate(&model, 50_000, Regime::Target).unwrap().dataset;
    let target = model.target_prior().clone();
    let zs = AdjustmentSpec::new(model.pretrain_prior().clone(), target.clone(), 1.0).unwrap();
    let sg = AdjustmentSpec::new(model.sgg_prior().clone(), target, 1.0).unwrap();
    let mut ens = Predictions::new(50);
    let mut base = Predictions::new(50);
    for s in ds.samples() {
        let p_zs = zs.probs(Branch::Zs.relation_logits(s)).unwrap();
        let p_sg = sg.probs(Branch::Sg.relation_logits(s)).unwrap();
        ens.insert(
            &s.sample_id,
            ensemble_probs(s, &p_zs, &p_sg, 1.0).unwrap().full(),
        )
        .unwrap();
        base.insert(&s.sample_id, single_branch(s, &p_sg).unwrap().full())
            .unwrap();
    }
    let mut opts = SplitOptions::new(vec![20, 50, 100]);
    opts.splits = vec![Split::All, Split::Unseen];
    let r_ens = split_report(&ens, &ds, &opts).unwrap();
    let r_base = split_report(&base, &ds, &opts).unwrap();
    let acc = |r: &relbias_core::MetricReport, s: Split| r.splits[&s].report.as_ref().unwrap().acc;
    assert!(acc(&r_base, Split::Unseen) < acc(&r_base, Split::All));
    let gain_unseen = acc(&r_ens, Split::Unseen) - acc(&r_base, Split::Unseen);
    let gain_all = acc(&r_ens, Split::All) - acc(&r_base, Split::All);
    assert!(gain_unseen > gain_all, "{gain_unseen} vs {gain_all}");
}
