use std::collections::BTreeSet;

use moelab::analysis::DomainFrequencyMatrix;
use moelab::autodiff::{Tape, Tensor};
use moelab::balance::{global_lbl, lbl, BalanceStats};
use moelab::data::{build_global_batch, read_corpus, write_corpus, CorpusConfig, CorpusSettings};
use moelab::moe::{expert_load, select_topk, GatingDecision};
use moelab::parallel::{FrequencyBuffer, ParallelPlan, SyncScope};
use moelab::trainer::{BalanceMode, SwitchPoint, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softmax_rows(logits: &[f64], n: usize) -> Vec<f64> {
    logits
        .chunks(n)
        .flat_map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |x| x / s)
        })
        .collect()
}

fn random_decision(rng: &mut ChaCha8Rng, t: usize, n: usize, k: usize, skew: f64) -> GatingDecision {
    let logits: Vec<f64> = (0..t * n)
        .map(|i| rng.gen_range(-2.0..2.0) + skew * (i % n) as f64 / n as f64)
        .collect();
    let probs = Tensor::from_vec(t, n, softmax_rows(&logits, n)).unwrap();
    select_topk(&probs, k, None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn global_lbl_equals_pooled_lbl(seed in any::<u64>(), groups in 1usize..=8, n in 2usize..=32, t_max in 1usize..=64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(1..=n);
        let sizes: Vec<usize> = (0..groups).map(|_| rng.gen_range(1..=t_max)).collect();
        let decisions: Vec<GatingDecision> = sizes.iter().map(|&t| random_decision(&mut rng, t, n, k, 3.0)).collect();
        let stats: Vec<BalanceStats> = decisions.iter().map(BalanceStats::from_decision).collect();
        let synced = BalanceStats::sum(&stats).unwrap();

        let mut tape = Tape::new();
        let probs: Vec<_> = decisions.iter().map(|d| tape.constant(d.probs.clone())).collect();
        let per_group: Vec<_> = stats.iter().zip(&probs).map(|(s, p)| (s, *p)).collect();
        let g = global_lbl(&mut tape, &synced, &per_group).unwrap();

        // pooled oracle by direct double loop over the concatenated batch
        let total: usize = sizes.iter().sum();
        let mut counts = vec![0u64; n];
        let mut psum = vec![0.0; n];
        for d in &decisions {
            for tok in 0..d.n_tokens() {
                for e in 0..n {
                    counts[e] += u64::from(d.selected(tok, e));
                    psum[e] += d.probs.get(tok, e);
                }
            }
        }
        let oracle: f64 = n as f64
            * (0..n)
                .map(|e| counts[e] as f64 / (total * k) as f64 * psum[e] / total as f64)
                .sum::<f64>();
        prop_assert!((tape.value(g).item() - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn routing_is_dropless_and_frequencies_sum_to_one(seed in any::<u64>(), t in 1usize..=64, n in 1usize..=32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(1..=n);
        let d = random_decision(&mut rng, t, n, k, 0.0);
        for tok in 0..t {
            prop_assert_eq!(d.selection[tok * n..(tok + 1) * n].iter().map(|&b| b as usize).sum::<usize>(), k);
            let picked: BTreeSet<usize> = d.indices(tok).iter().copied().collect();
            prop_assert_eq!(picked.len(), k);
        }
        prop_assert_eq!(expert_load(&d).iter().sum::<u64>(), (t * k) as u64);
        let s = BalanceStats::from_decision(&d);
        s.check().unwrap();
        let f: f64 = s.frequencies().unwrap().iter().sum();
        prop_assert!((f - 1.0).abs() < 1e-12);
        let p: f64 = s.mean_probs().unwrap().iter().sum();
        prop_assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logit_shift_keeps_probs_and_selection(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, n, k) = (8, 12, 3);
        let logits: Vec<f64> = (0..t * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(t, n, logits).unwrap());
        let b = tape.constant(Tensor::from_vec(t, n, shifted).unwrap());
        let (pa, pb) = (tape.softmax(a).unwrap(), tape.softmax(b).unwrap());
        let (pa, pb) = (tape.value(pa).clone(), tape.value(pb).clone());
        for (x, y) in pa.data().iter().zip(pb.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let (da, db) = (select_topk(&pa, k, None).unwrap(), select_topk(&pb, k, None).unwrap());
        prop_assert_eq!(da.selection, db.selection);
    }

    #[test]
    fn stats_merge_is_order_independent_in_counts(seed in any::<u64>(), groups in 2usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stats: Vec<BalanceStats> = (0..groups)
            .map(|_| {
                let t = rng.gen_range(1..20);
                BalanceStats::from_decision(&random_decision(&mut rng, t, 6, 2, 1.0))
            })
            .collect();
        let fwd = BalanceStats::sum(&stats).unwrap();
        let rev = BalanceStats::sum(stats.iter().rev()).unwrap();
        prop_assert_eq!(&fwd.counts, &rev.counts);
        prop_assert_eq!(fwd.n_tokens, rev.n_tokens);
        for (a, b) in fwd.prob_sums.iter().zip(&rev.prob_sums) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // repeated reduction in one order is bitwise stable
        prop_assert_eq!(fwd, BalanceStats::sum(&stats).unwrap());
    }

    #[test]
    fn buffer_at_last_step_is_window_frequency(seed in any::<u64>(), ga in 1usize..=8, n in 2usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(1..=n);
        let mut buf = FrequencyBuffer::new(n, k);
        let mut window = Vec::new();
        for _ in 0..ga {
            let t = rng.gen_range(1..40);
            let s = BalanceStats::from_decision(&random_decision(&mut rng, t, n, k, 2.0));
            buf.update(&s).unwrap();
            window.push(s);
        }
        let pooled = BalanceStats::sum(&window).unwrap();
        prop_assert_eq!(buf.ga_step_index, ga);
        prop_assert_eq!(buf.frequencies().unwrap(), pooled.frequencies().unwrap());

        buf.reset();
        prop_assert_eq!(buf, FrequencyBuffer::new(n, k));
    }

    #[test]
    fn wider_scope_never_sees_fewer_domains(seed in any::<u64>(), log_groups in 1u32..=4, domains in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_groups = 1usize << log_groups;
        let labels: Vec<usize> = (0..n_groups).map(|_| rng.gen_range(0..domains)).collect();
        let plan = ParallelPlan { n_groups, ..ParallelPlan::default() };
        let mut scopes = vec![SyncScope::None];
        scopes.extend((1..log_groups).map(|w| SyncScope::Subgroup(1 << w)));
        scopes.push(SyncScope::Global);
        let seen = |scope: SyncScope| -> Vec<usize> {
            let mut per_group = vec![0; n_groups];
            for cell in plan.cells(scope) {
                let d: BTreeSet<usize> = cell.iter().map(|&g| labels[g]).collect();
                cell.iter().for_each(|&g| per_group[g] = d.len());
            }
            per_group
        };
        for w in scopes.windows(2) {
            let (narrow, wide) = (seen(w[0]), seen(w[1]));
            prop_assert!(narrow.iter().zip(&wide).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn frequency_rows_are_distributions(seed in any::<u64>(), domains in 1usize..=4, layers in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = (8, 2);
        let decisions: Vec<Vec<GatingDecision>> = (0..domains)
            .map(|_| (0..layers).map(|_| {
                let t = rng.gen_range(1..30);
                random_decision(&mut rng, t, n, k, 4.0)
            }).collect())
            .collect();
        let names: Vec<String> = (0..domains).map(|d| format!("d{d}")).collect();
        let m = DomainFrequencyMatrix::from_decisions(names, &decisions).unwrap();
        for l in 0..layers {
            for d in 0..domains {
                let row = m.row(l, d);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn micro_batches_are_domain_pure_for_any_valid_recipe(seed in any::<u64>(), raw in prop::collection::vec(0.0f64..1.0, 3)) {
        prop_assume!(raw.iter().sum::<f64>() > 1e-3);
        let total: f64 = raw.iter().sum();
        let recipe: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let settings = CorpusSettings {
            domains: vec!["a".into(), "b".into(), "c".into()],
            recipe: recipe.clone(),
            seq_len: 8,
            heldout_per_domain: 1,
            separation: 0.0,
            ..CorpusSettings::default()
        };
        let cfg = CorpusConfig::generate(&settings).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mb in build_global_batch(&cfg, 6, 3, &mut rng).unwrap() {
            let d = cfg.domain_index(&mb.domain).unwrap();
            prop_assert!(recipe[d] > 0.0);
            let spec = &cfg.domains[d];
            for (seq, &s) in mb.tokens.iter().zip(&mb.seeds) {
                prop_assert_eq!(seq, &moelab::data::sequence_from_seed(spec, 8, s).unwrap());
            }
        }
    }

    #[test]
    fn negative_recipe_weights_are_rejected(w in -1.0f64..-1e-6) {
        let settings = CorpusSettings {
            domains: vec!["a".into(), "b".into()],
            recipe: vec![1.0 - w, w],
            ..CorpusSettings::default()
        };
        prop_assert!(CorpusConfig::generate(&settings).is_err());
    }

    #[test]
    fn switch_steps_must_increase(a in 1usize..100, b in 1usize..100) {
        let cfg = TrainConfig {
            steps: 100,
            switch_schedule: vec![
                SwitchPoint { step: a, mode: BalanceMode::GlobalSync },
                SwitchPoint { step: b, mode: BalanceMode::Micro },
            ],
            ..TrainConfig::default()
        };
        prop_assert_eq!(cfg.validate(&ParallelPlan::default()).is_ok(), a < b);
    }

    #[test]
    fn corpus_dump_round_trips(seqs in prop::collection::vec(prop::collection::vec(0u32..64, 5), 0..10)) {
        let mut buf = Vec::new();
        write_corpus(&mut buf, 64, 5, &seqs).unwrap();
        prop_assert_eq!(buf.len(), 4 + 16 + 4 * 5 * seqs.len());
        let back = read_corpus(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.seqs, seqs);
    }

    #[test]
    fn pooled_lbl_gradient_splits_across_groups(seed in any::<u64>()) {
        // d(global)/d(P^j) computed per group matches the pooled LBL gradient restricted to group j's rows
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = (6, 2);
        let ds: Vec<GatingDecision> = (0..3).map(|_| {
            let t = rng.gen_range(1..12);
            random_decision(&mut rng, t, n, k, 2.0)
        }).collect();
        let stats: Vec<BalanceStats> = ds.iter().map(BalanceStats::from_decision).collect();
        let synced = BalanceStats::sum(&stats).unwrap();

        let mut tape = Tape::new();
        let leaves: Vec<_> = ds.iter().map(|d| tape.leaf(&d.probs.clone().requires_grad(true))).collect();
        let pg: Vec<_> = stats.iter().zip(&leaves).map(|(s, v)| (s, *v)).collect();
        let g = global_lbl(&mut tape, &synced, &pg).unwrap();
        tape.backward(g).unwrap();

        let rows: Vec<f64> = ds.iter().flat_map(|d| d.probs.data().to_vec()).collect();
        let mut t2 = Tape::new();
        let pooled = t2.leaf(&Tensor::from_vec(synced.n_tokens, n, rows).unwrap().requires_grad(true));
        let l = lbl(&mut t2, &synced, pooled).unwrap();
        t2.backward(l).unwrap();
        let pooled_grad = t2.grad(pooled).unwrap().to_vec();

        let split: Vec<f64> = leaves.iter().flat_map(|v| tape.grad(*v).unwrap().to_vec()).collect();
        for (a, b) in split.iter().zip(&pooled_grad) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
