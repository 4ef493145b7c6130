//! Library-level pipeline checks: training, database build, search and
//! evaluation against the brute-force oracles.

mod common;

use clipq::evaluation::{mean_average_precision, EvalOptions, LabelSet};
use clipq::quantizer::Codebooks;
use clipq::retrieval::{build_database, query_top_k, search, LookupTable};
use clipq::store::{encode_database, FeatureSet};
use clipq::synth::{clustered, ClusterSpec};
use clipq::trainer::{fit, init_parameters, Hyperparams, Model, ProjectionHead};
use clipq::Error;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_items(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> FeatureSet {
    let mut set = FeatureSet::new(1, dim, 3).unwrap();
    for i in 0..n {
        let values: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        set.push(i as u64, LabelSet::from_labels(3, &[i % 3]).unwrap(), &values).unwrap();
    }
    set
}

fn random_model(dim: usize, m: usize, k: usize, seed: u64) -> Model {
    let (head, codebooks) = init_parameters(dim, dim, m, k, seed).unwrap();
    let h = Hyperparams {
        num_codebooks: m,
        num_codewords: k,
        seed,
        ..Hyperparams::default()
    };
    Model::new(h, head, codebooks).unwrap()
}

fn small_spec(seed: u64) -> ClusterSpec {
    ClusterSpec {
        clusters: 4,
        dim: 16,
        train_per_cluster: 60,
        query_per_cluster: 8,
        seed,
        ..ClusterSpec::default()
    }
}

fn small_hyper(seed: u64) -> Hyperparams {
    Hyperparams {
        num_codebooks: 4,
        num_codewords: 16,
        batch_size: 32,
        eta: 4,
        max_epochs: 8,
        seed,
        ..Hyperparams::default()
    }
}

#[test]
fn database_of_1000_items_with_four_codebooks_holds_4000_code_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let items = random_items(&mut rng, 1000, 32);
    let db = build_database(&items, &random_model(32, 4, 256, 1)).unwrap();
    assert_eq!(db.code_bytes(), 4000);
    assert_eq!(db.codes().len(), 4000);
}

#[test]
fn codeword_concatenation_encodes_to_its_own_indices() {
    let (m, k, d) = (3, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, codebooks) = init_parameters(m * d, m * d, m, k, 2).unwrap();
    let model = Model::new(
        Hyperparams {
            num_codebooks: m,
            num_codewords: k,
            ..Hyperparams::default()
        },
        ProjectionHead::identity(m * d),
        codebooks.clone(),
    )
    .unwrap();
    let mut items = FeatureSet::new(1, m * d, 1).unwrap();
    let mut expected = Vec::new();
    for id in 0..50u64 {
        let code: Vec<u8> = (0..m).map(|_| rng.random_range(0..k as u8)).collect();
        let raw: Vec<f32> = code
            .iter()
            .enumerate()
            .flat_map(|(mm, &i)| codebooks.codeword(mm, i as usize).iter().map(|&x| x as f32))
            .collect();
        items.push(id, LabelSet::empty(1), &raw).unwrap();
        expected.extend(code);
    }
    let db = build_database(&items, &model).unwrap();
    assert_eq!(db.codes(), &expected[..]);
}

#[test]
fn rebuilding_gives_identical_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let items = random_items(&mut rng, 300, 16);
    let model = random_model(16, 2, 256, 3);
    let first = encode_database(&build_database(&items, &model).unwrap());
    let second = encode_database(&build_database(&items, &model).unwrap());
    assert_eq!(first, second);
}

#[test]
fn feature_dimension_must_match_the_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items = random_items(&mut rng, 10, 12);
    let err = build_database(&items, &random_model(16, 2, 16, 4)).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch(_)), "{err}");
}

#[test]
fn every_database_item_retrieves_itself_with_the_top_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let items = random_items(&mut rng, 400, 16);
    let model = random_model(16, 4, 16, 5);
    let db = build_database(&items, &model).unwrap();
    for pos in 0..items.len() {
        let raw: Vec<f64> = items.view(pos, 0).iter().map(|&x| x as f64).collect();
        let lut = LookupTable::from_feature(&model.embed(&raw).unwrap(), db.codebooks()).unwrap();
        let result = search(&db, &lut, db.len()).unwrap();
        let own = result.positions.iter().position(|&p| p == pos).unwrap();
        assert_eq!(result.scores[own], result.scores[0], "item {pos}");
    }
}

#[test]
fn scan_merges_partitions_like_a_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 70_000;
    let (m, k) = (2, 16);
    let (_, codebooks) = init_parameters(8, 8, m, k, 6).unwrap();
    let codes: Vec<u8> = (0..n * m).map(|_| rng.random_range(0..k as u8)).collect();
    let ids: Vec<u64> = (0..n as u64).map(|i| (i * 7919) % 1_000_003).collect();
    let labels = vec![LabelSet::empty(1); n];
    let db = clipq::retrieval::CodeDatabase::new(codes, ids, labels, codebooks, Default::default()).unwrap();
    for q in 0..5 {
        let raw: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = query_top_k(&db, &raw, &ProjectionHead::identity(8), 300).unwrap();
        let z = ProjectionHead::identity(8).project(&raw).unwrap();
        let want = brute_force_ranking(&z, db.codebooks(), db.codes(), db.item_ids(), 300);
        let want_ids: Vec<u64> = want.iter().map(|w| w.0).collect();
        assert_eq!(got.item_ids, want_ids, "query {q}");
    }
}

#[test]
fn search_leaves_the_database_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let items = random_items(&mut rng, 500, 16);
    let model = random_model(16, 4, 256, 7);
    let db = build_database(&items, &model).unwrap();
    let before = encode_database(&db);
    for _ in 0..200 {
        let raw: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        query_top_k(&db, &raw, &model.head, 10).unwrap();
    }
    assert_eq!(encode_database(&db), before);
}

#[test]
fn training_lowers_the_loss_and_is_reproducible() {
    let data = clustered(&small_spec(0)).unwrap();
    let h = small_hyper(3);
    let (report, model) = fit(&data.train, &h).unwrap();
    let losses: Vec<f64> = report.history.iter().map(|l| l.total).collect();
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    let best = report.best_loss().unwrap().total;
    assert!(losses.iter().all(|&l| l >= best));
    let (again_report, again) = fit(&data.train, &h).unwrap();
    assert_eq!(again, model);
    assert_eq!(again_report.history, report.history);
}

#[test]
fn zero_epochs_returns_the_initial_parameters() {
    let data = clustered(&small_spec(1)).unwrap();
    let h = Hyperparams {
        max_epochs: 0,
        ..small_hyper(9)
    };
    let (report, model) = fit(&data.train, &h).unwrap();
    assert!(report.history.is_empty());
    assert_eq!(report.best_epoch, None);
    let (head, codebooks) = init_parameters(16, 16, 4, 16, 9).unwrap();
    assert_eq!(model.head, head);
    assert_eq!(model.codebooks, codebooks);
}

#[test]
fn training_input_errors() {
    let data = clustered(&small_spec(2)).unwrap();
    let too_big = Hyperparams {
        batch_size: data.train.len() + 1,
        eta: 0,
        ..small_hyper(0)
    };
    assert!(matches!(
        fit(&data.train, &too_big),
        Err(Error::BatchLargerThanDataset { .. })
    ));
    let empty = FeatureSet::new(2, 16, 4).unwrap();
    assert!(matches!(fit(&empty, &small_hyper(0)), Err(Error::EmptyDataset)));
    assert!(matches!(
        fit(&data.database, &small_hyper(0)),
        Err(Error::InvalidParameter(_))
    ));
    let clip_all = Hyperparams {
        eta: 2 * (32 - 1),
        ..small_hyper(0)
    };
    assert!(matches!(fit(&data.train, &clip_all), Err(Error::InvalidParameter(_))));
}

#[test]
fn trained_map_matches_the_oracle() {
    let data = clustered(&small_spec(3)).unwrap();
    let (_, model) = fit(&data.train, &small_hyper(4)).unwrap();
    let db = build_database(&data.database, &model).unwrap();
    let cutoff = 50;
    let result = mean_average_precision(&data.query, &db, &model, &EvalOptions::at(cutoff)).unwrap();
    for q in 0..data.query.len() {
        let raw: Vec<f64> = data.query.view(q, 0).iter().map(|&x| x as f64).collect();
        let z = model.embed(&raw).unwrap();
        let ranking = brute_force_ranking(&z, db.codebooks(), db.codes(), db.item_ids(), cutoff);
        let cluster = (0..4).find(|&c| data.query.labels(q).contains(c)).unwrap();
        let flags: Vec<bool> = ranking
            .iter()
            .map(|&(_, _, pos)| data.database.labels(pos).contains(cluster))
            .collect();
        assert_eq!(result.per_query[q], brute_force_ap(&flags, cutoff), "query {q}");
    }
    assert!(result.map > 0.5, "{}", result.map);
}

#[test]
fn database_sharing_every_label_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut items = FeatureSet::new(1, 8, 2).unwrap();
    for i in 0..40 {
        let values: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        items.push(i, LabelSet::from_labels(2, &[0, (i % 2) as usize]).unwrap(), &values).unwrap();
    }
    let queries = items.clone();
    let model = random_model(8, 2, 16, 8);
    let db = build_database(&items, &model).unwrap();
    let result = mean_average_precision(&queries, &db, &model, &EvalOptions::at(10)).unwrap();
    assert_eq!(result.map, 1.0);
}

fn small_codebooks() -> impl Strategy<Value = (Codebooks, Vec<u8>, Vec<f64>)> {
    (1usize..=4, prop::sample::select(vec![2usize, 16, 256]), 1usize..=3, 1usize..=200).prop_flat_map(
        |(m, k, d, n)| {
            (
                prop::collection::vec(-1.0f64..1.0, m * k * d),
                prop::collection::vec(0..k as u16, n * m),
                prop::collection::vec(-1.0f64..1.0, m * d),
            )
                .prop_map(move |(w, codes, z)| {
                    let cb = Codebooks::new(m, k, d, w).unwrap();
                    let codes = codes.into_iter().map(|c| c as u8).collect();
                    (cb, codes, z)
                })
        },
    )
}

proptest! {
    #[test]
    fn lookup_table_search_equals_direct_scoring((cb, codes, z) in small_codebooks(), k in 1usize..50) {
        let m = cb.num_codebooks();
        let n = codes.len() / m;
        let ids: Vec<u64> = (0..n as u64).rev().collect();
        let db = clipq::retrieval::CodeDatabase::new(
            codes, ids, vec![LabelSet::empty(1); n], cb.clone(), Default::default(),
        ).unwrap();
        let lut = LookupTable::from_feature(&z, &cb).unwrap();
        let got = search(&db, &lut, k).unwrap();
        let want = brute_force_ranking(&z, &cb, db.codes(), db.item_ids(), k);
        prop_assert_eq!(got.item_ids, want.iter().map(|w| w.0).collect::<Vec<_>>());
        prop_assert_eq!(got.scores, want.iter().map(|w| w.1).collect::<Vec<_>>());
    }
}
