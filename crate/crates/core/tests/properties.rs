use std::collections::HashSet;

use proptest::prelude::*;

use mrff::data::{build_sequences, leave_one_out_split, IdMap, Interaction, InteractionLog};
use mrff::federated::{aggregate_global, aggregate_group, Delta, UploadPayload};
use mrff::loss::{balance_loss, GroupProportions};
use mrff::metrics::{auc, logloss, EvalRecord};
use mrff::model::{ModelConfig, ParamSet, Partition};
use mrff::tensor::{Graph, Rng, Tensor};

fn records(scores: &[f64], labels: &[u8]) -> Vec<EvalRecord> {
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| EvalRecord::new(s, l).unwrap())
        .collect()
}

fn labeled() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(0u8..=1, n).prop_filter("both classes", |l| {
                l.contains(&0) && l.contains(&1)
            }),
        )
    })
}

fn log_strategy() -> impl Strategy<Value = InteractionLog> {
    prop::collection::vec((0u32..4, 0u32..12, 0i64..30, 0u8..=1), 1..80).prop_map(|rows| {
        let recs = rows
            .into_iter()
            .map(|(user, item, time, label)| Interaction { user, item, time, label })
            .collect();
        InteractionLog::from_records(recs, 4, 12).unwrap()
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let p = g.softmax(x, 1).unwrap();
        for row in g.value(p).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn auc_invariant_under_monotone_maps((scores, labels) in labeled()) {
        let base = auc(&records(&scores, &labels)).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| 0.25 + s * s / 2.0).collect();
        let moved = auc(&records(&squashed, &labels)).unwrap();
        prop_assert!((base - moved).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn auc_flips_with_labels((scores, labels) in labeled()) {
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let a = auc(&records(&scores, &labels)).unwrap();
        let b = auc(&records(&scores, &flipped)).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logloss_non_negative((scores, labels) in labeled()) {
        prop_assert!(logloss(&records(&scores, &labels)).unwrap() >= 0.0);
    }

    #[test]
    fn balance_matches_direct_sum(n in 1usize..8, l in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let dist = |rng: &mut Rng| {
            let raw: Vec<f64> = (0..n).map(|_| rng.next_f64() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let f_rows: Vec<Vec<f64>> = (0..l).map(|_| dist(&mut rng)).collect();
        let p_rows: Vec<Vec<f64>> = (0..l).map(|_| dist(&mut rng)).collect();
        let f = GroupProportions::new(f_rows.clone()).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let probs: Vec<_> = p_rows.iter().map(|r| g.constant(Tensor::row(r))).collect();
        let b = balance_loss(&mut g, &probs, &f).unwrap();
        let direct: f64 = n as f64
            * f_rows.iter().zip(&p_rows).map(|(fr, pr)| fr.iter().zip(pr).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>();
        prop_assert!((g.value(b).item() - direct).abs() < 1e-12);
        prop_assert!(g.value(b).item() <= (n * l) as f64 + 1e-12);
    }

    #[test]
    fn aggregation_ignores_arrival_order(
        specs in prop::collection::vec((1usize..20, 0usize..3, -1.0f64..1.0), 1..6),
        rotation in 0usize..6,
    ) {
        let cfg = ModelConfig {
            d_model: 2,
            n_heads: 1,
            n_blocks: 1,
            n_groups: 3,
            max_seq_len: 2,
            ffn_hidden: 2,
            gate_hidden: 2,
            pred_hidden: vec![],
            attr_vocab: vec![3],
            ..Default::default()
        };
        let base = ParamSet::<f32>::init(&cfg, &mut Rng::new(0)).unwrap();
        let payloads: Vec<UploadPayload> = specs
            .iter()
            .enumerate()
            .map(|(c, &(n, group, v))| UploadPayload {
                client: c as u32,
                n_samples: n,
                deltas: base
                    .iter()
                    .filter(|p| match p.partition {
                        Partition::Global => true,
                        Partition::Group { group: g, .. } => g == group,
                        Partition::Private => false,
                    })
                    .map(|p| Delta {
                        name: p.name.clone(),
                        values: (0..p.value.len()).map(|i| v * (i as f64 + 0.5)).collect(),
                    })
                    .collect(),
                assignments: vec![group],
                noise: None,
            })
            .collect();
        let mut a = base.clone();
        let wa = aggregate_global(&payloads, &mut a).unwrap();
        aggregate_group(&payloads, &mut a).unwrap();
        let mut shuffled = payloads.clone();
        let k = rotation % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let mut b = base.clone();
        aggregate_global(&shuffled, &mut b).unwrap();
        aggregate_group(&shuffled, &mut b).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((wa.iter().map(|w| w.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn id_map_round_trip(raws in prop::collection::vec("[a-z0-9]{0,6}", 0..40)) {
        let mut m = IdMap::default();
        let ids: Vec<u32> = raws.iter().map(|r| m.intern(r)).collect();
        let distinct: HashSet<&String> = raws.iter().collect();
        prop_assert_eq!(m.len(), distinct.len());
        for (r, id) in raws.iter().zip(ids) {
            prop_assert_eq!(m.decode(id), Some(r.as_str()));
            prop_assert_eq!(m.encode(r), Some(id));
        }
        let back: IdMap = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn split_is_a_sound_partition(log in log_strategy()) {
        let split = leave_one_out_split(&log);
        let per_user = log.per_user();
        for (u, s) in split.users.iter().enumerate() {
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            let mut expect = per_user[u].clone();
            expect.sort_unstable();
            prop_assert_eq!(all, expect);
            let clicks = per_user[u].iter().filter(|&&i| log.records[i].label == 1).count();
            prop_assert_eq!(s.train_only, clicks < 3);
            if !s.train_only {
                let n_clicks = |ids: &[usize]| ids.iter().filter(|&&i| log.records[i].label == 1).count();
                prop_assert_eq!(n_clicks(&s.val), 1);
                prop_assert_eq!(n_clicks(&s.test), 1);
                let pos = |i: usize| per_user[u].iter().position(|&x| x == i).unwrap();
                let last_train = s.train.iter().map(|&i| pos(i)).max().unwrap();
                prop_assert!(s.val.iter().all(|&i| pos(i) > last_train));
                let last_val = s.val.iter().map(|&i| pos(i)).max().unwrap();
                prop_assert!(s.test.iter().all(|&i| pos(i) > last_val));
            }
        }
    }

    #[test]
    fn histories_only_hold_earlier_clicks(log in log_strategy(), max_len in 1usize..6) {
        let split = leave_one_out_split(&log);
        for seqs in build_sequences(&log, &split, max_len) {
            for s in seqs.train.iter().chain(&seqs.val).chain(&seqs.test) {
                let t = log.records[s.impression].time;
                let earlier: Vec<u32> = {
                    let mut c: Vec<(i64, u32, usize)> = log
                        .records
                        .iter()
                        .enumerate()
                        .filter(|(_, r)| r.user == s.user && r.label == 1 && r.time < t)
                        .map(|(i, r)| (r.time, r.item, i))
                        .collect();
                    c.sort_unstable();
                    c.into_iter().map(|x| x.1).collect()
                };
                let kept: Vec<u32> = s.history.iter().zip(&s.mask).filter(|(_, &m)| m).map(|(&h, _)| h).collect();
                let tail = &earlier[earlier.len().saturating_sub(max_len)..];
                prop_assert_eq!(kept.as_slice(), tail);
                prop_assert_eq!(s.history.len(), max_len);
                prop_assert!(s.mask.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }
}
