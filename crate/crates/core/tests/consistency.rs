use petsql::consistency::{
    candidate_key, difficulty_vote, naive_vote, naive_vote_with, RoutingTable, VoteOptions,
};
use petsql::execution::{ExecutionOutcome, ResultKey, Value};
use petsql::sqlanalysis::{DifficultyGrade, Round, SqlCandidate};
use proptest::prelude::*;

const MODELS: [&str; 5] = ["slot_a", "slot_b", "slot_c", "slot_d", "slot_e"];

/// `None` is an execution error, `Some(v)` a one-cell answer.
fn candidate(i: usize, answer: Option<i64>) -> SqlCandidate {
    let round = if i == 0 { Round::Presql } else { Round::Finsql };
    let mut c = SqlCandidate::new(MODELS[i % MODELS.len()], round, format!("SELECT {i}"));
    c.outcome = Some(match answer {
        Some(v) => ExecutionOutcome::ok(vec![vec![Value::Integer(v)]]),
        None => ExecutionOutcome::error("boom"),
    });
    c
}

fn answers() -> impl Strategy<Value = Vec<Option<i64>>> {
    prop::collection::vec(prop::option::weighted(0.8, 0i64..3), 1..8)
}

proptest! {
    #[test]
    fn winner_has_the_most_votes(xs in answers()) {
        let cs: Vec<SqlCandidate> = xs.iter().enumerate().map(|(i, a)| candidate(i, *a)).collect();
        let d = naive_vote(&cs).unwrap();
        let best = (0..3).map(|v| xs.iter().filter(|a| **a == Some(v)).count()).max().unwrap();
        if best == 0 {
            prop_assert!(d.all_failed);
            prop_assert_eq!(d.chosen.round, Round::Presql);
        } else {
            let winner = xs[d.chosen_index].unwrap();
            prop_assert_eq!(xs.iter().filter(|a| **a == Some(winner)).count(), best);
            // Among tied answers the earliest candidate wins.
            let first_tied = xs
                .iter()
                .position(|a| a.is_some_and(|v| xs.iter().filter(|b| **b == Some(v)).count() == best))
                .unwrap();
            prop_assert_eq!(d.chosen_index, first_tied);
            prop_assert_eq!(&d.winner_key, &candidate_key(&cs[first_tied]));
        }
        prop_assert_eq!(d.tally.iter().map(|(_, n)| n).sum::<usize>(), cs.len());
    }

    #[test]
    fn unique_majority_survives_reordering(xs in answers(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let cs: Vec<SqlCandidate> = xs.iter().enumerate().map(|(i, a)| candidate(i, *a)).collect();
        let d = naive_vote(&cs).unwrap();
        let top = d.tally.iter().filter(|(k, _)| k.is_answer()).map(|(_, n)| *n).max();
        let unique = top.is_some_and(|t| d.tally.iter().filter(|(k, n)| k.is_answer() && *n == t).count() == 1);
        prop_assume!(unique);
        let mut shuffled = cs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(naive_vote(&shuffled).unwrap().winner_key, d.winner_key);
    }

    #[test]
    fn random_pick_stays_in_the_winning_group(xs in answers(), seed in any::<u64>()) {
        let cs: Vec<SqlCandidate> = xs.iter().enumerate().map(|(i, a)| candidate(i, *a)).collect();
        let options = VoteOptions { random_pick: Some(seed) };
        let a = naive_vote_with(&cs, &options).unwrap();
        let b = naive_vote_with(&cs, &options).unwrap();
        prop_assert_eq!(a.chosen_index, b.chosen_index);
        if !a.all_failed {
            prop_assert_eq!(candidate_key(&cs[a.chosen_index]), a.winner_key.clone());
            prop_assert_eq!(&a.winner_key, &naive_vote(&cs).unwrap().winner_key);
        }
    }

    #[test]
    fn routed_vote_only_hears_routed_models(xs in answers(), g in 0usize..4) {
        let grade = DifficultyGrade::ALL[g];
        let routing = RoutingTable::default_slots();
        let cs: Vec<SqlCandidate> = xs.iter().enumerate().map(|(i, a)| candidate(i, *a)).collect();
        let d = difficulty_vote(grade, &routing, &cs).unwrap();
        let allowed = routing.models_for(grade);
        if cs.iter().any(|c| allowed.contains(&c.model_id)) {
            prop_assert!(d.participants.iter().all(|m| allowed.contains(m)));
            prop_assert!(allowed.contains(&cs[d.chosen_index].model_id));
        } else {
            prop_assert_eq!(d.participants.len(), cs.len());
        }
        prop_assert_eq!(&cs[d.chosen_index], &d.chosen);
    }
}

#[test]
fn unexecuted_candidates_count_as_errors() {
    let mut c = SqlCandidate::new("m", Round::Finsql, "SELECT 1");
    assert_eq!(candidate_key(&c), ResultKey::Error);
    c.outcome = Some(ExecutionOutcome::timeout(30_000));
    assert_eq!(candidate_key(&c), ResultKey::Timeout);
}

#[test]
fn row_order_does_not_split_votes() {
    let rows =
        |r: &[i64]| ExecutionOutcome::ok(r.iter().map(|v| vec![Value::Integer(*v)]).collect());
    let mut a = SqlCandidate::new("m1", Round::Finsql, "SELECT x FROM t ORDER BY x");
    a.outcome = Some(rows(&[1, 2]));
    let mut b = SqlCandidate::new("m2", Round::Finsql, "SELECT x FROM t ORDER BY x DESC");
    b.outcome = Some(rows(&[2, 1]));
    let mut c = SqlCandidate::new("m3", Round::Finsql, "SELECT 3");
    c.outcome = Some(rows(&[3]));
    let d = naive_vote(&[c, a, b]).unwrap();
    assert_eq!(d.chosen.model_id, "m1");
    assert_eq!(d.votes_for(&d.winner_key), 2);
}

#[test]
fn routing_table_parses_from_toml() {
    let text = r#"
        [grades]
        easy = ["x"]
        medium = ["x", "y"]
        hard = ["y"]
        extra = ["y"]
    "#;
    let table: RoutingTable = toml::from_str(text).unwrap();
    table.validate().unwrap();
    assert_eq!(table.models_for(DifficultyGrade::Medium), ["x", "y"]);
    let broken: RoutingTable = toml::from_str("[grades]\neasy = [\"x\"]").unwrap();
    assert!(broken.validate().is_err());
}
