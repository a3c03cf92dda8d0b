mod common;

use common::*;
use itm_core::metrics::{self, Direction, RetrievalRun};
use itm_core::ngram;
use itm_core::semrel::{self, QueryKind, SimMatrix};
use itm_core::Corpus;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KS: [usize; 3] = [1, 5, 10];

fn random_run(rng: &mut ChaCha8Rng, dir: Direction, n_queries: usize, n_items: usize) -> RetrievalRun {
    let rankings = (0..n_queries)
        .map(|_| {
            let mut r: Vec<u32> = (0..n_items as u32).collect();
            r.shuffle(rng);
            r
        })
        .collect();
    RetrievalRun::new(dir, n_items, rankings, "random").unwrap()
}

/// A corpus with `n_images` images of five captions each and a random
/// strictly positive similarity matrix.
fn fixture(rng: &mut ChaCha8Rng, n_images: usize) -> (Corpus, SimMatrix) {
    let groups: Vec<Vec<String>> = (0..n_images)
        .map(|i| (0..5).map(|j| format!("image {i} caption {j}")).collect())
        .collect();
    let c = corpus_from(&groups);
    let values = (0..n_images * c.n_captions()).map(|_| rng.gen_range(0.01f32..10.0)).collect();
    let sim = SimMatrix::from_values(n_images, c.n_captions(), values, "none").unwrap();
    (c, sim)
}

fn both_runs(rng: &mut ChaCha8Rng, c: &Corpus) -> [RetrievalRun; 2] {
    [
        random_run(rng, Direction::I2t, c.n_images(), c.n_captions()),
        random_run(rng, Direction::T2i, c.n_captions(), c.n_images()),
    ]
}

fn seed() -> impl Strategy<Value = ChaCha8Rng> {
    any::<u64>().prop_map(ChaCha8Rng::seed_from_u64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ir_recall_never_exceeds_vse_recall(mut rng in seed(), n in 3usize..15) {
        let (c, _) = fixture(&mut rng, n);
        for run in both_runs(&mut rng, &c) {
            for k in KS {
                let v = metrics::recall_vse(&run, &c, k).unwrap();
                let r = metrics::recall_ir(&run, &c, k).unwrap();
                for (a, b) in r.values.iter().zip(&v.values) {
                    prop_assert!(a <= b);
                    prop_assert!((0.0..=1.0).contains(a));
                    if run.direction() == Direction::T2i {
                        prop_assert_eq!(a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn metrics_are_monotone_in_k(mut rng in seed(), n in 3usize..12, m in 1usize..12) {
        let (c, sim) = fixture(&mut rng, n);
        for run in both_runs(&mut rng, &c) {
            let ext = metrics::extended_sets(&sim, run.direction(), m);
            let mut prev: Option<[Vec<f64>; 4]> = None;
            for k in 1..=run.n_items() {
                let cur = [
                    metrics::recall_vse(&run, &c, k).unwrap().values,
                    metrics::recall_ir(&run, &c, k).unwrap().values,
                    metrics::semantic_recall(&run, &ext, k).unwrap().values,
                    metrics::ncs(&run, &ext, k).unwrap().values,
                ];
                for vals in &cur {
                    prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
                }
                if let Some(p) = &prev {
                    for (a, b) in p.iter().zip(&cur) {
                        prop_assert!(a.iter().zip(b).all(|(x, y)| x <= y));
                    }
                }
                prev = Some(cur);
            }
        }
    }

    #[test]
    fn ncs_is_one_exactly_when_extended_set_retrieved(mut rng in seed(), n in 3usize..12, m in 1usize..8, k in 1usize..15) {
        let (c, sim) = fixture(&mut rng, n);
        for run in both_runs(&mut rng, &c) {
            let ext = metrics::extended_sets(&sim, run.direction(), m);
            let scores = metrics::ncs(&run, &ext, k).unwrap();
            for (q, e) in ext.iter().enumerate() {
                let top = run.top_k(q, k);
                let covered = e.items.iter().all(|it| top.contains(&(it.index as u32)));
                prop_assert_eq!(scores.values[q] == 1.0, covered);
            }
        }
    }

    #[test]
    fn metrics_ignore_order_below_cutoff(mut rng in seed(), n in 3usize..12, m in 1usize..8) {
        let (c, sim) = fixture(&mut rng, n);
        let kmax = *KS.iter().max().unwrap();
        for run in both_runs(&mut rng, &c) {
            let dir = run.direction();
            let shuffled: Vec<Vec<u32>> = (0..run.n_queries())
                .map(|q| {
                    let mut r = run.ranking(q).to_vec();
                    if r.len() > kmax {
                        r[kmax..].shuffle(&mut rng);
                    }
                    r
                })
                .collect();
            let other = RetrievalRun::new(dir, run.n_items(), shuffled, "shuffled").unwrap();
            let ext = metrics::extended_sets(&sim, dir, m);
            for k in KS {
                prop_assert_eq!(metrics::recall_vse(&run, &c, k).unwrap(), metrics::recall_vse(&other, &c, k).unwrap());
                prop_assert_eq!(metrics::recall_ir(&run, &c, k).unwrap(), metrics::recall_ir(&other, &c, k).unwrap());
                prop_assert_eq!(metrics::semantic_recall(&run, &ext, k).unwrap(), metrics::semantic_recall(&other, &ext, k).unwrap());
                prop_assert_eq!(metrics::ncs(&run, &ext, k).unwrap(), metrics::ncs(&other, &ext, k).unwrap());
            }
        }
    }

    #[test]
    fn semantic_recall_with_forced_gt_is_ir_recall(mut rng in seed(), n in 3usize..12) {
        let (c, sim) = fixture(&mut rng, n);
        for run in both_runs(&mut rng, &c) {
            let dir = run.direction();
            let ext: Vec<_> = (0..run.n_queries())
                .map(|q| {
                    let gt = metrics::ground_truth(&c, dir, q);
                    semrel::extended_gt_force(&sim, dir.query_kind(), q, gt.len(), &gt)
                })
                .collect();
            for k in KS {
                let sr = metrics::semantic_recall(&run, &ext, k).unwrap();
                let ir = metrics::recall_ir(&run, &c, k).unwrap();
                for (a, b) in sr.values.iter().zip(&ir.values) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn extended_sets_grow_by_prefix(mut rng in seed(), n in 2usize..10, m in 1usize..20, extra in 1usize..20) {
        let (c, sim) = fixture(&mut rng, n);
        // ties exercise the index tie-break
        let values: Vec<f32> = sim.values().iter().map(|v| v.round()).collect();
        let sim = SimMatrix::from_values(n, c.n_captions(), values, "none").unwrap();
        for (kind, count) in [(QueryKind::Image, n), (QueryKind::Caption, c.n_captions())] {
            for q in 0..count {
                let short = semrel::extended_gt(&sim, kind, q, m);
                let long = semrel::extended_gt(&sim, kind, q, m + extra);
                prop_assert!(long.items.starts_with(&short.items));
                for w in long.items.windows(2) {
                    prop_assert!(w[0].value > w[1].value || (w[0].value == w[1].value && w[0].index < w[1].index));
                }
            }
        }
    }

    #[test]
    fn pearson_is_symmetric_and_affine_invariant(
        pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..60),
        a in 0.01f64..50.0, b in -50.0f64..50.0,
    ) {
        let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let r = metrics::pearson_r(&x, &y).unwrap();
        prop_assert!((r - metrics::pearson_r(&y, &x).unwrap()).abs() <= 1e-12);
        let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((r - metrics::pearson_r(&xs, &y).unwrap()).abs() <= 1e-9);
        prop_assert!((-1.0..=1.0).contains(&r));
    }
}

#[test]
fn sim_matrix_bytes_do_not_depend_on_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let c = corpus_from(&random_groups(&mut rng, 40, 30));
    let df = ngram::build_df(&c);
    let build = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| semrel::build_sim_matrix(&c, &df).to_bytes())
    };
    let one = build(1);
    for t in [2, 3, 8] {
        assert_eq!(build(t), one);
    }
}

#[test]
fn streaming_writer_matches_dense_file() {
    let c = toy_corpus();
    let df = ngram::build_df(&c);
    let dense = semrel::build_sim_matrix(&c, &df);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.sim");
    semrel::write_sim_streaming(&c, &df, false, 5, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), dense.to_bytes());
    let back = semrel::load_sim(&path, Some(&df.checksum())).unwrap();
    assert_eq!(back, dense);
}

/// Top-`m` indices of `values`, by value then index.
fn top_m(values: &[f64], m: usize, keep: &dyn Fn(usize) -> bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| keep(i)).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

/// Hand-rolled sums for one direction: (Σ 100·R^V, Σ 100·NCS, Σ 100·NCS(N)).
fn oracle_sums(c: &Corpus, sim: &SimMatrix, run: &RetrievalRun, ks: &[usize]) -> (f64, f64, f64) {
    let dir = run.direction();
    let (mut r, mut n, mut nn) = (0.0, 0.0, 0.0);
    for &k in ks {
        let (mut rv, mut ncs, mut ncs_n) = (0.0, 0.0, 0.0);
        for q in 0..run.n_queries() {
            let gt: Vec<usize> = match dir {
                Direction::I2t => c.gt(q).to_vec(),
                Direction::T2i => vec![c.image_of(q)],
            };
            let values: Vec<f64> = (0..run.n_items())
                .map(|it| match dir {
                    Direction::I2t => sim.get(q, it) as f64,
                    Direction::T2i => sim.get(it, q) as f64,
                })
                .collect();
            let ranking: Vec<usize> = run.ranking(q).iter().map(|&i| i as usize).collect();
            let top = &ranking[..k.min(ranking.len())];
            if gt.iter().any(|g| top.contains(g)) {
                rv += 1.0;
            }
            let score = |ext: &[usize], top: &[usize]| {
                let total: f64 = ext.iter().map(|&i| values[i]).sum();
                let got: f64 = ext.iter().filter(|i| top.contains(i)).map(|&i| values[i]).sum();
                if total > 0.0 {
                    got / total
                } else {
                    0.0
                }
            };
            ncs += score(&top_m(&values, k, &|_| true), top);
            let pruned: Vec<usize> = ranking.iter().copied().filter(|i| !gt.contains(i)).take(k).collect();
            ncs_n += score(&top_m(&values, k, &|i| !gt.contains(&i)), &pruned);
        }
        let nq = run.n_queries() as f64;
        r += 100.0 * rv / nq;
        n += 100.0 * ncs / nq;
        nn += 100.0 * ncs_n / nq;
    }
    (r, n, nn)
}

#[test]
fn aggregate_matches_hand_computed_sums_on_toy() {
    let c = toy_corpus();
    let sim = semrel::build_sim_matrix(&c, &ngram::build_df(&c));
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let [i2t, t2i] = both_runs(&mut rng, &c);
        let report = metrics::aggregate(&i2t, &t2i, &c, &sim, &metrics::EvalConfig::default()).unwrap();
        let a = oracle_sums(&c, &sim, &i2t, &KS);
        let b = oracle_sums(&c, &sim, &t2i, &KS);
        assert!((report.rsum - (a.0 + b.0)).abs() < 1e-9);
        assert!((report.nsum - (a.1 + b.1)).abs() < 1e-9);
        assert!((report.nsum_non_gt - (a.2 + b.2)).abs() < 1e-9);
        assert_eq!(report.config.m, "k");
    }
}

#[test]
fn non_gt_ncs_on_three_images_by_hand() {
    // image 0 owns captions 0-1, image 1 owns 2-3, image 2 owns 4-5
    let groups: Vec<Vec<String>> = (0..3).map(|i| vec![format!("a{i}"), format!("b{i}")]).collect();
    let c = corpus_from(&groups);
    #[rustfmt::skip]
    let values = vec![
        9.0, 8.0, 3.0, 1.0, 2.0, 0.0,
        1.0, 0.0, 9.0, 9.0, 4.0, 4.0,
        0.0, 5.0, 0.0, 0.0, 9.0, 7.0,
    ];
    let sim = SimMatrix::from_values(3, 6, values, "none").unwrap();
    let run = RetrievalRun::new(
        Direction::I2t,
        6,
        vec![vec![0, 4, 1, 2, 3, 5], vec![5, 2, 0, 3, 4, 1], vec![1, 0, 4, 5, 2, 3]],
        "hand",
    )
    .unwrap();
    let got = metrics::ncs_non_gt(&run, &sim, &c, 2, 2).unwrap().values;
    // query 0: pruned ranking [4, 2, ...], ideal non-GT {2: 3, 4: 2} -> 5/5
    // query 1: pruned ranking [5, 0, ...], ideal {4: 4, 5: 4} -> 4/8
    // query 2: pruned ranking [1, 0, ...], ideal {1: 5, 0: 0} -> 5/5
    assert_eq!(got, vec![1.0, 0.5, 1.0]);
}
