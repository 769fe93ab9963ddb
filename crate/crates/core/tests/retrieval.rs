mod support;

use std::collections::{BTreeMap, BTreeSet};

use petsql::catalog::DbSchema;
use petsql::retrieval::{
    build_pool, desemanticize, desemanticize_with_values, DemoPool, ProviderConfig, TfidfTrigrams,
    TrainInstance, MASK,
};
use proptest::prelude::*;

fn concert_singer() -> DbSchema {
    support::dev_catalog()
        .get("concert_singer")
        .unwrap()
        .clone()
}

#[test]
fn masks_schema_mentions() {
    let schema = concert_singer();
    let cases = [
        (
            "How many singers do we have?",
            "How many <mask> do we have?",
        ),
        (
            "What is the average, minimum, and maximum age of all singers from France?",
            "What is the <mask>, minimum, and maximum <mask> of all <mask> from France?",
        ),
        (
            "Show the name and the release year of the song by the youngest singer.",
            "Show the <mask> and the release <mask> of the song by the youngest <mask>.",
        ),
        (
            "What are the names of the singers whose country is \"France\"?",
            "What are the <mask> of the <mask> whose <mask> is <mask>?",
        ),
        (
            "Show the stadium name and capacity.",
            "Show the <mask> and <mask>.",
        ),
        (
            "What are the song names of all singers above the average age?",
            // Adjacent masks collapse into one.
            "What are the <mask> of all <mask> above the <mask>?",
        ),
    ];
    for (question, expected) in cases {
        assert_eq!(desemanticize(question, &schema), expected, "{question}");
    }
}

#[test]
fn masks_known_cell_values_when_given() {
    let schema = concert_singer();
    let values = vec!["France".to_string(), "United States".to_string()];
    assert_eq!(
        desemanticize_with_values(
            "Which singers are from United States or France?",
            &schema,
            &values
        ),
        "Which <mask> are from <mask> or <mask>?"
    );
}

/// Independent TF-IDF: raw trigram counts, smoothed idf, L2 normalisation.
fn oracle_scores(corpus: &[String], query: &str) -> Vec<f64> {
    let grams = |t: &str| -> Vec<String> {
        let chars: Vec<char> = format!(" {} ", t.to_lowercase()).chars().collect();
        (0..chars.len().saturating_sub(2))
            .map(|i| chars[i..i + 3].iter().collect())
            .collect()
    };
    let mut df: BTreeMap<String, f64> = BTreeMap::new();
    for doc in corpus {
        for g in grams(doc).into_iter().collect::<BTreeSet<_>>() {
            *df.entry(g).or_default() += 1.0;
        }
    }
    let n = corpus.len() as f64;
    let vector = |t: &str| -> BTreeMap<String, f64> {
        let mut v: BTreeMap<String, f64> = BTreeMap::new();
        for g in grams(t) {
            if let Some(d) = df.get(&g) {
                *v.entry(g).or_default() += ((1.0 + n) / (1.0 + d)).ln() + 1.0;
            }
        }
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        v.values_mut()
            .for_each(|x| *x /= norm.max(f64::MIN_POSITIVE));
        v
    };
    let q = vector(query);
    corpus
        .iter()
        .map(|d| {
            let v = vector(d);
            q.iter().map(|(g, x)| x * v.get(g).unwrap_or(&0.0)).sum()
        })
        .collect()
}

fn five_demos() -> Vec<TrainInstance> {
    [
        "How many singers do we have?",
        "What is the total number of singers?",
        "Show name, country, age for all singers ordered by age from the oldest to the youngest.",
        "What are the names of the stadiums without any concerts?",
        "How many concerts are there in year 2014 or 2015?",
    ]
    .iter()
    .map(|q| TrainInstance {
        db_id: "concert_singer".into(),
        question: q.to_string(),
        sql: "SELECT 1".into(),
    })
    .collect()
}

#[test]
fn ranking_matches_brute_force_cosine() {
    let catalog = support::dev_catalog();
    let pool = build_pool(
        &five_demos(),
        &catalog,
        ProviderConfig::TfidfTrigram.build(),
    )
    .unwrap();
    let skeletons: Vec<String> = pool.demos().iter().map(|d| d.skeleton.clone()).collect();
    let target = desemanticize("How many concerts do we have?", &concert_singer());
    let expected = oracle_scores(&skeletons, &target);

    let got = pool.top_k(&target, 5).unwrap();
    assert_eq!(got.len(), 5);
    for s in &got {
        assert!(
            (s.similarity as f64 - expected[s.position]).abs() < 1e-5,
            "position {}",
            s.position
        );
    }
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| expected[b].total_cmp(&expected[a]).then(a.cmp(&b)));
    assert_eq!(got.iter().map(|s| s.position).collect::<Vec<_>>(), order);
    // "How many <mask> do we have?" is an exact skeleton match.
    assert_eq!(got[0].position, 0);
    assert!((got[0].similarity - 1.0).abs() < 1e-5);
}

#[test]
fn pool_round_trips_through_disk() {
    let catalog = support::dev_catalog();
    let pool = build_pool(
        &five_demos(),
        &catalog,
        ProviderConfig::TfidfTrigram.build(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.json");
    pool.save(&path).unwrap();
    let loaded = DemoPool::load(&path).unwrap();
    assert_eq!(loaded.demos(), pool.demos());
    let q = "How many <mask> are there?";
    let a: Vec<(usize, f32)> = pool
        .top_k(q, 3)
        .unwrap()
        .iter()
        .map(|s| (s.position, s.similarity))
        .collect();
    let b: Vec<(usize, f32)> = loaded
        .top_k(q, 3)
        .unwrap()
        .iter()
        .map(|s| (s.position, s.similarity))
        .collect();
    assert_eq!(a, b);

    std::fs::write(&path, r#"{"format":"other","version":9}"#).unwrap();
    assert!(DemoPool::load(&path).is_err());
}

#[test]
fn filtered_retrieval_skips_rejected_demos() {
    let catalog = support::dev_catalog();
    let pool = build_pool(
        &five_demos(),
        &catalog,
        ProviderConfig::TfidfTrigram.build(),
    )
    .unwrap();
    let got = pool
        .top_k_filtered("How many <mask> do we have?", 9, |d| {
            !d.question.contains("singers")
        })
        .unwrap();
    assert_eq!(got.len(), 2);
    assert!(got.iter().all(|s| s.position >= 3));
}

#[test]
fn unknown_database_is_reported() {
    let catalog = support::dev_catalog();
    let mut demos = five_demos();
    demos[0].db_id = "nowhere".into();
    assert!(build_pool(&demos, &catalog, Box::new(TfidfTrigrams::default())).is_err());
}

fn question_strategy() -> impl Strategy<Value = String> {
    let words = prop::sample::select(vec![
        "How",
        "many",
        "singers",
        "singer",
        "concert",
        "names",
        "of",
        "the",
        "stadium",
        "with",
        "age",
        "\"France\"",
        "capacity",
        "year",
        "'Joe'",
        "in",
        "and",
        "average",
        "?",
        ",",
    ]);
    prop::collection::vec(words, 1..12).prop_map(|w| w.join(" "))
}

fn pool_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(question_strategy(), 1..12)
}

proptest! {
    #[test]
    fn masking_is_idempotent(q in question_strategy()) {
        let schema = concert_singer();
        let once = desemanticize(&q, &schema);
        prop_assert_eq!(desemanticize(&once, &schema), once.clone());
        let doubled = format!("{} {}", MASK, MASK);
        prop_assert!(!once.contains(&doubled));
    }

    #[test]
    fn smaller_k_is_a_prefix(questions in pool_strategy(), probe in question_strategy(), k in 0usize..12) {
        let catalog = support::dev_catalog();
        let instances: Vec<TrainInstance> = questions
            .iter()
            .map(|q| TrainInstance { db_id: "concert_singer".into(), question: q.clone(), sql: "SELECT 1".into() })
            .collect();
        let pool = build_pool(&instances, &catalog, ProviderConfig::TfidfTrigram.build()).unwrap();
        let full: Vec<usize> = pool.top_k(&probe, 12).unwrap().iter().map(|s| s.position).collect();
        let part: Vec<usize> = pool.top_k(&probe, k).unwrap().iter().map(|s| s.position).collect();
        prop_assert_eq!(part.len(), k.min(pool.len()));
        prop_assert_eq!(&full[..part.len()], &part[..]);
    }

    #[test]
    fn every_demo_retrieves_an_identical_skeleton_first(questions in pool_strategy(), pick in any::<prop::sample::Index>()) {
        let catalog = support::dev_catalog();
        let instances: Vec<TrainInstance> = questions
            .iter()
            .map(|q| TrainInstance { db_id: "concert_singer".into(), question: q.clone(), sql: "SELECT 1".into() })
            .collect();
        let pool = build_pool(&instances, &catalog, ProviderConfig::TfidfTrigram.build()).unwrap();
        let i = pick.index(pool.len());
        let skeleton = pool.demos()[i].skeleton.clone();
        let best = &pool.top_k(&skeleton, 1).unwrap()[0];
        prop_assert_eq!(&best.demo.skeleton, &skeleton);
        prop_assert!(best.position <= i);
    }
}
