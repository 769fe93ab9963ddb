//! Cross-consistency voting over executed candidates.
//!
//! Candidates are grouped by the key of their execution result. The biggest
//! group of successful results wins; a group of failures can never win while
//! any candidate produced rows.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::execution::{result_key, ResultKey};
use crate::sqlanalysis::{DifficultyGrade, Round, SqlCandidate};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VoteError {
    #[error("no candidates to vote on")]
    EmptyCandidates,
    #[error("routing table has no models for grade {0}")]
    EmptyGrade(DifficultyGrade),
}

/// Models allowed to vote for each difficulty grade, in priority order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub grades: BTreeMap<DifficultyGrade, Vec<String>>,
}

impl RoutingTable {
    pub fn new(grades: BTreeMap<DifficultyGrade, Vec<String>>) -> Result<Self, VoteError> {
        let table = RoutingTable { grades };
        table.validate()?;
        Ok(table)
    }

    /// Every grade routed to the same model list.
    pub fn uniform(models: &[String]) -> Self {
        RoutingTable {
            grades: DifficultyGrade::ALL
                .iter()
                .map(|g| (*g, models.to_vec()))
                .collect(),
        }
    }

    /// Five symbolic slots arranged like the reference setup: slot_a and
    /// slot_b are code models, slot_c and slot_d general models, slot_e the
    /// strongest model.
    pub fn default_slots() -> Self {
        let list = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        RoutingTable {
            grades: BTreeMap::from([
                (DifficultyGrade::Easy, list(&["slot_b", "slot_c", "slot_d"])),
                (
                    DifficultyGrade::Medium,
                    list(&["slot_e", "slot_c", "slot_d", "slot_a"]),
                ),
                (DifficultyGrade::Hard, list(&["slot_e", "slot_c", "slot_d"])),
                (DifficultyGrade::Extra, list(&["slot_e", "slot_d"])),
            ]),
        }
    }

    pub fn validate(&self) -> Result<(), VoteError> {
        for grade in DifficultyGrade::ALL {
            if self.grades.get(&grade).is_none_or(|m| m.is_empty()) {
                return Err(VoteError::EmptyGrade(grade));
            }
        }
        Ok(())
    }

    pub fn models_for(&self, grade: DifficultyGrade) -> &[String] {
        self.grades.get(&grade).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOptions {
    /// Pick the representative of the winning group at random with this
    /// seed instead of taking its highest-priority member.
    pub random_pick: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteDecision {
    pub winner_key: ResultKey,
    pub chosen: SqlCandidate,
    /// Position of `chosen` in the candidate list the vote ran over.
    pub chosen_index: usize,
    /// Vote count per key, in order of first appearance.
    pub tally: Vec<(ResultKey, usize)>,
    pub participants: Vec<String>,
    pub tie_break_used: bool,
    /// Set when no candidate executed successfully and the PreSQL was kept.
    pub all_failed: bool,
}

impl VoteDecision {
    pub fn votes_for(&self, key: &ResultKey) -> usize {
        self.tally
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, n)| *n)
            .unwrap_or(0)
    }
}

/// Voting key of a candidate. Candidates never executed count as failures.
pub fn candidate_key(candidate: &SqlCandidate) -> ResultKey {
    candidate
        .outcome
        .as_ref()
        .map(|o| result_key(o, false))
        .unwrap_or(ResultKey::Error)
}

pub fn naive_vote(candidates: &[SqlCandidate]) -> Result<VoteDecision, VoteError> {
    naive_vote_with(candidates, &VoteOptions::default())
}

pub fn naive_vote_with(
    candidates: &[SqlCandidate],
    options: &VoteOptions,
) -> Result<VoteDecision, VoteError> {
    if candidates.is_empty() {
        return Err(VoteError::EmptyCandidates);
    }
    let keys: Vec<ResultKey> = candidates.iter().map(candidate_key).collect();

    // key -> member positions, groups in order of first appearance
    let mut groups: Vec<(ResultKey, Vec<usize>)> = Vec::new();
    for (i, key) in keys.iter().enumerate() {
        match groups.iter_mut().find(|(k, _)| k == key) {
            Some((_, members)) => members.push(i),
            None => groups.push((key.clone(), vec![i])),
        }
    }
    let tally = groups.iter().map(|(k, m)| (k.clone(), m.len())).collect();
    let participants = candidates.iter().map(|c| c.model_id.clone()).collect();

    let best = groups
        .iter()
        .filter(|(k, _)| k.is_answer())
        .map(|(_, m)| m.len())
        .max();
    let Some(best) = best else {
        let chosen_index = candidates
            .iter()
            .position(|c| c.round == Round::Presql)
            .unwrap_or(0);
        return Ok(VoteDecision {
            winner_key: keys[chosen_index].clone(),
            chosen: candidates[chosen_index].clone(),
            chosen_index,
            tally,
            participants,
            tie_break_used: false,
            all_failed: true,
        });
    };

    // Groups are in first-appearance order, so the first tied group holds the
    // earliest candidate.
    let tied: Vec<&(ResultKey, Vec<usize>)> = groups
        .iter()
        .filter(|(k, m)| k.is_answer() && m.len() == best)
        .collect();
    let (winner_key, members) = tied[0];
    let chosen_index = match options.random_pick {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            *members.choose(&mut rng).unwrap()
        }
        None => members[0],
    };
    Ok(VoteDecision {
        winner_key: winner_key.clone(),
        chosen: candidates[chosen_index].clone(),
        chosen_index,
        tally,
        participants,
        tie_break_used: tied.len() > 1,
        all_failed: false,
    })
}

pub fn difficulty_vote(
    grade: DifficultyGrade,
    routing: &RoutingTable,
    candidates: &[SqlCandidate],
) -> Result<VoteDecision, VoteError> {
    difficulty_vote_with(grade, routing, candidates, &VoteOptions::default())
}

/// Vote among the candidates whose model is routed for `grade`. Candidate
/// order is preserved; when nobody qualifies every candidate votes.
pub fn difficulty_vote_with(
    grade: DifficultyGrade,
    routing: &RoutingTable,
    candidates: &[SqlCandidate],
    options: &VoteOptions,
) -> Result<VoteDecision, VoteError> {
    if candidates.is_empty() {
        return Err(VoteError::EmptyCandidates);
    }
    let allowed = routing.models_for(grade);
    let positions: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| allowed.contains(&c.model_id))
        .map(|(i, _)| i)
        .collect();
    if positions.is_empty() {
        return naive_vote_with(candidates, options);
    }
    let filtered: Vec<SqlCandidate> = positions.iter().map(|&i| candidates[i].clone()).collect();
    let mut decision = naive_vote_with(&filtered, options)?;
    decision.chosen_index = positions[decision.chosen_index];
    Ok(decision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execution::{ExecutionOutcome, Value};

    fn cand(model: &str, round: Round, answer: Option<i64>) -> SqlCandidate {
        let mut c = SqlCandidate::new(model, round, format!("SELECT {answer:?}"));
        c.outcome = Some(match answer {
            Some(v) => ExecutionOutcome::ok(vec![vec![Value::Integer(v)]]),
            None => ExecutionOutcome::error("no such table"),
        });
        c
    }

    #[test]
    fn strict_majority() {
        let cs = [
            cand("m1", Round::Finsql, Some(1)),
            cand("m2", Round::Finsql, Some(1)),
            cand("m3", Round::Finsql, Some(2)),
        ];
        let d = naive_vote(&cs).unwrap();
        assert_eq!(d.winner_key, candidate_key(&cs[0]));
        assert_eq!(d.votes_for(&candidate_key(&cs[0])), 2);
        assert_eq!(d.votes_for(&candidate_key(&cs[2])), 1);
        assert!(!d.tie_break_used);
    }

    #[test]
    fn tie_goes_to_earliest_candidate() {
        let a = cand("m1", Round::Finsql, Some(1));
        let b = cand("m2", Round::Finsql, Some(2));
        let d = naive_vote(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(d.chosen.model_id, "m1");
        assert!(d.tie_break_used);
        let d = naive_vote(&[b, a]).unwrap();
        assert_eq!(d.chosen.model_id, "m2");
    }

    #[test]
    fn errors_lose_to_answers_and_fall_back_to_presql() {
        let cs = [
            cand("m1", Round::Finsql, None),
            cand("m2", Round::Finsql, None),
            cand("m3", Round::Finsql, Some(7)),
        ];
        assert_eq!(naive_vote(&cs).unwrap().chosen.model_id, "m3");
        let cs = [
            cand("m1", Round::Finsql, None),
            cand("p", Round::Presql, None),
        ];
        let d = naive_vote(&cs).unwrap();
        assert!(d.all_failed);
        assert_eq!(d.chosen.model_id, "p");
    }

    #[test]
    fn empty_is_an_error() {
        assert_eq!(naive_vote(&[]).unwrap_err(), VoteError::EmptyCandidates);
    }

    #[test]
    fn routing_defaults_cover_every_grade() {
        RoutingTable::default_slots().validate().unwrap();
        assert_eq!(
            RoutingTable::default_slots()
                .models_for(DifficultyGrade::Extra)
                .len(),
            2
        );
    }

    #[test]
    fn difficulty_filter_keeps_routed_models() {
        let routing = RoutingTable::default_slots();
        let cs = [
            cand("slot_a", Round::Finsql, Some(9)),
            cand("slot_b", Round::Finsql, Some(9)),
            cand("slot_e", Round::Finsql, Some(1)),
            cand("slot_d", Round::Finsql, Some(1)),
        ];
        let d = difficulty_vote(DifficultyGrade::Extra, &routing, &cs).unwrap();
        assert_eq!(d.participants, vec!["slot_e", "slot_d"]);
        assert_eq!(d.chosen_index, 2);
    }
}
