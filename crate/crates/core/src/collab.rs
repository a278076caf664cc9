//! Inter-agent collaboration: adaptive epsilon-greedy exploration, the
//! comm-set union, and the shared critical-state buffer with top-K broadcast
//! and similarity-based exploration deprioritization.
//!
//! The buffer is the only shared mutable structure between agents. Broadcast
//! content never feeds any network; it only scales the probability that a
//! peer re-evaluates a similar state during saliency identification.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::state_key;
use crate::error::{Error, Result};
use crate::masking::{uniform_action, ActionSource, MaskDecision};
use crate::rng::RngStream;

/// Exponentially decaying exploration rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub epsilon0: f64,
    pub decay_lambda: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            epsilon0: 1.0,
            decay_lambda: 5e-4,
        }
    }
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon0) {
            return Err(Error::Config("epsilon0 must be in [0, 1]".into()));
        }
        if self.decay_lambda < 0.0 || !self.decay_lambda.is_finite() {
            return Err(Error::Config("decay_lambda must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// `epsilon_t = epsilon0 * exp(-lambda * t)`.
pub fn epsilon_at(schedule: &EpsilonSchedule, t: u64) -> f64 {
    schedule.epsilon0 * (-schedule.decay_lambda * t as f64).exp()
}

/// With probability `epsilon` replaces the decision's action by a uniform
/// legal draw, marking the source as epsilon-random. Applied after the mask
/// gate; the mask's randomized flag is left untouched.
pub fn apply_exploration(
    mut decision: MaskDecision,
    epsilon: f64,
    legal: &[usize],
    rng: &mut RngStream,
) -> MaskDecision {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        decision.action = uniform_action(legal, rng);
        decision.source = ActionSource::EpsilonRandom;
    }
    decision
}

/// Exact set union of per-agent state sets, deduplicated by rounded feature
/// equality and returned in canonical (key-sorted) order, which makes the
/// union commutative, associative, and idempotent as a plain `Vec`.
pub fn comm_union(local_sets: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let mut keyed: Vec<(Vec<i64>, Vec<f64>)> = Vec::new();
    for set in local_sets {
        for state in set {
            let key = state_key(state);
            if !keyed.iter().any(|(k, _)| *k == key) {
                keyed.push((key, state.clone()));
            }
        }
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    keyed.into_iter().map(|(_, s)| s).collect()
}

/// The unit exchanged through the shared buffer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalStateEntry {
    pub state: Vec<f64>,
    pub score: f64,
    pub agent_id: usize,
    pub timestep: usize,
    pub insertion_tick: u64,
    /// Monotone sequence number assigned by the buffer; refines recency.
    #[serde(default)]
    pub seq: u64,
}

/// Bounded global store of critical states with periodic top-K broadcast.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SharedBuffer {
    entries: Vec<CriticalStateEntry>,
    pub capacity: usize,
    /// Broadcast fires only at ticks that are multiples of this interval.
    pub interval: u64,
    /// Number of entries per broadcast.
    pub broadcast_size: usize,
    next_seq: u64,
}

/// Ordering used for both eviction and top-K: higher score wins, then more
/// recent insertion (tick, then sequence number).
fn entry_rank(e: &CriticalStateEntry) -> (f64, u64, u64) {
    (e.score, e.insertion_tick, e.seq)
}

fn rank_cmp(a: &CriticalStateEntry, b: &CriticalStateEntry) -> std::cmp::Ordering {
    let (sa, ta, qa) = entry_rank(a);
    let (sb, tb, qb) = entry_rank(b);
    sa.partial_cmp(&sb)
        .unwrap()
        .then(ta.cmp(&tb))
        .then(qa.cmp(&qb))
}

impl SharedBuffer {
    pub fn new(capacity: usize, interval: u64, broadcast_size: usize) -> Self {
        SharedBuffer {
            entries: Vec::new(),
            capacity,
            interval,
            broadcast_size,
            next_seq: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CriticalStateEntry] {
        &self.entries
    }

    /// Inserts an entry; when over capacity the lowest-score entry is
    /// evicted, with ties broken against the oldest insertion.
    pub fn insert(&mut self, mut entry: CriticalStateEntry) {
        entry.seq = self.next_seq;
        self.next_seq += 1;
        self.entries.push(entry);
        while self.entries.len() > self.capacity {
            let worst = self
                .entries
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| rank_cmp(a, b))
                .map(|(i, _)| i)
                .expect("buffer non-empty");
            self.entries.remove(worst);
        }
    }

    /// The current `broadcast_size` best entries, best first. Ignores the
    /// tick gate; use [`SharedBuffer::broadcast_topk`] for scheduled
    /// broadcasts.
    pub fn peek_topk(&self) -> Vec<CriticalStateEntry> {
        let mut sorted: Vec<CriticalStateEntry> = self.entries.clone();
        sorted.sort_by(|a, b| rank_cmp(b, a));
        sorted.truncate(self.broadcast_size);
        sorted
    }

    /// Top-K broadcast: non-empty only when `tick` is a multiple of the
    /// interval. Entries are the highest-score entries, descending.
    pub fn broadcast_topk(&self, tick: u64) -> Vec<CriticalStateEntry> {
        if self.interval == 0 || tick % self.interval != 0 {
            return Vec::new();
        }
        self.peek_topk()
    }

    /// JSON snapshot for inspection.
    pub fn snapshot_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Euclidean distance between a state and a set of broadcast entries.
fn min_distance(state: &[f64], entries: &[CriticalStateEntry]) -> Option<f64> {
    entries
        .iter()
        .map(|e| {
            state
                .iter()
                .zip(&e.state)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}

/// Saliency-evaluation deprioritization weight: `w_min` when the state lies
/// within `delta` of any broadcast entry, otherwise 1. `w_min` stays above
/// zero so peer-reported states keep some probability of re-evaluation.
pub fn exploration_weight(
    state: &[f64],
    broadcast: &[CriticalStateEntry],
    delta: f64,
    w_min: f64,
) -> f64 {
    match min_distance(state, broadcast) {
        Some(d) if d <= delta => w_min,
        _ => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn epsilon_examples() {
        let s = EpsilonSchedule { epsilon0: 0.8, decay_lambda: 0.01 };
        assert_eq!(epsilon_at(&s, 0), 0.8);
        let flat = EpsilonSchedule { epsilon0: 0.3, decay_lambda: 0.0 };
        for t in [0, 1, 10, 1000] {
            assert_eq!(epsilon_at(&flat, t), 0.3);
        }
        let halving = EpsilonSchedule { epsilon0: 1.0, decay_lambda: std::f64::consts::LN_2 };
        assert!((epsilon_at(&halving, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn epsilon_is_strictly_decreasing_and_non_negative() {
        let s = EpsilonSchedule { epsilon0: 1.0, decay_lambda: 2e-3 };
        let mut prev = f64::INFINITY;
        for t in 0..2000 {
            let e = epsilon_at(&s, t);
            assert!(e >= 0.0);
            assert!(e < prev);
            prev = e;
        }
    }

    fn dummy_decision() -> MaskDecision {
        MaskDecision {
            mask_value: 0.9,
            randomized: false,
            action: 3,
            source: ActionSource::Policy,
        }
    }

    #[test]
    fn exploration_zero_keeps_decision() {
        let mut r = rng::stream(1);
        for _ in 0..100 {
            let d = apply_exploration(dummy_decision(), 0.0, &[0, 1, 2, 3], &mut r);
            assert_eq!(d.action, 3);
            assert_eq!(d.source, ActionSource::Policy);
        }
    }

    #[test]
    fn exploration_one_always_randomizes() {
        let mut r = rng::stream(2);
        for _ in 0..100 {
            let d = apply_exploration(dummy_decision(), 1.0, &[0, 1], &mut r);
            assert_eq!(d.source, ActionSource::EpsilonRandom);
            assert!(d.action < 2);
            // The mask's randomized flag is not the exploration flag.
            assert!(!d.randomized);
        }
    }

    #[test]
    fn exploration_frequency_matches_epsilon() {
        let mut r = rng::stream(3);
        let eps = 0.25;
        let n = 100_000;
        let mut replaced = 0;
        for _ in 0..n {
            let d = apply_exploration(dummy_decision(), eps, &[0, 1, 2], &mut r);
            if d.source == ActionSource::EpsilonRandom {
                replaced += 1;
            }
        }
        let freq = replaced as f64 / n as f64;
        assert!((freq - eps).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn union_of_single_set_is_itself() {
        let set = vec![vec![1.0, 2.0], vec![0.0, 0.5]];
        let got = comm_union(std::slice::from_ref(&set));
        assert_eq!(got.len(), 2);
        for s in &set {
            assert!(got.contains(s));
        }
    }

    #[test]
    fn union_of_disjoint_sets_adds_sizes() {
        let a: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64, 0.0]).collect();
        let b: Vec<Vec<f64>> = (10..14).map(|i| vec![i as f64, 1.0]).collect();
        assert_eq!(comm_union(&[a, b]).len(), 7);
    }

    #[test]
    fn union_matches_pairwise_dedup_oracle() {
        use rand::Rng;
        let mut r = rng::stream(4);
        for _ in 0..50 {
            let n_sets = r.gen_range(1..=4);
            let sets: Vec<Vec<Vec<f64>>> = (0..n_sets)
                .map(|_| {
                    (0..r.gen_range(0..6))
                        .map(|_| vec![r.gen_range(0..4) as f64, r.gen_range(0..3) as f64])
                        .collect()
                })
                .collect();
            let got = comm_union(&sets);
            // Brute-force: pairwise-compare every state against all kept.
            let mut oracle: Vec<Vec<f64>> = Vec::new();
            for set in &sets {
                for s in set {
                    if !oracle.iter().any(|o| state_key(o) == state_key(s)) {
                        oracle.push(s.clone());
                    }
                }
            }
            assert_eq!(got.len(), oracle.len());
        }
    }

    fn entry(score: f64, agent: usize, tick: u64) -> CriticalStateEntry {
        CriticalStateEntry {
            state: vec![score, agent as f64],
            score,
            agent_id: agent,
            timestep: 0,
            insertion_tick: tick,
            seq: 0,
        }
    }

    #[test]
    fn insert_into_empty_buffer() {
        let mut buf = SharedBuffer::new(8, 50, 4);
        buf.insert(entry(1.0, 0, 0));
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn full_buffer_rejects_below_minimum_score() {
        let mut buf = SharedBuffer::new(3, 50, 4);
        buf.insert(entry(5.0, 0, 0));
        buf.insert(entry(4.0, 0, 1));
        buf.insert(entry(3.0, 0, 2));
        buf.insert(entry(1.0, 1, 3)); // below the current minimum
        let scores: Vec<f64> = buf.entries().iter().map(|e| e.score).collect();
        assert_eq!(buf.len(), 3);
        assert!(scores.contains(&5.0) && scores.contains(&4.0) && scores.contains(&3.0));
    }

    #[test]
    fn capacity_zero_buffer_stays_empty() {
        let mut buf = SharedBuffer::new(0, 50, 4);
        buf.insert(entry(9.0, 0, 0));
        assert!(buf.is_empty());
        assert!(buf.broadcast_topk(50).is_empty());
    }

    #[test]
    fn random_inserts_match_brute_force_keep_top() {
        use rand::Rng;
        let mut r = rng::stream(5);
        for _ in 0..30 {
            let capacity = r.gen_range(1..=6);
            let mut buf = SharedBuffer::new(capacity, 50, 4);
            let mut all: Vec<CriticalStateEntry> = Vec::new();
            for tick in 0..r.gen_range(1..20u64) {
                let mut e = entry((r.gen_range(0..5) as f64) * 0.5, 0, tick);
                e.seq = tick;
                buf.insert(e.clone());
                all.push(e);
            }
            // Brute force: keep top-capacity by (score, recency).
            all.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then(b.insertion_tick.cmp(&a.insertion_tick))
                    .then(b.seq.cmp(&a.seq))
            });
            all.truncate(capacity);
            let mut got: Vec<(u64, u64)> = buf
                .entries()
                .iter()
                .map(|e| (e.score.to_bits(), e.insertion_tick))
                .collect();
            let mut want: Vec<(u64, u64)> = all
                .iter()
                .map(|e| (e.score.to_bits(), e.insertion_tick))
                .collect();
            got.sort_unstable();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn broadcast_only_on_interval_multiples() {
        let mut buf = SharedBuffer::new(8, 50, 10);
        for i in 0..3 {
            buf.insert(entry(i as f64, 0, i as u64));
        }
        assert!(buf.broadcast_topk(49).is_empty());
        let b = buf.broadcast_topk(50);
        assert_eq!(b.len(), 3); // K = 10 exceeds the buffer size
        assert!(buf.broadcast_topk(51).is_empty());
        assert_eq!(buf.broadcast_topk(100).len(), 3);
    }

    #[test]
    fn broadcast_matches_sort_oracle_and_is_buffer_subset() {
        use rand::Rng;
        let mut r = rng::stream(6);
        for _ in 0..20 {
            let mut buf = SharedBuffer::new(16, 50, 5);
            for tick in 0..r.gen_range(1..25u64) {
                buf.insert(entry(r.gen_range(-3.0..3.0), 0, tick));
            }
            let got = buf.broadcast_topk(50);
            let mut oracle = buf.entries().to_vec();
            oracle.sort_by(|a, b| rank_cmp(b, a));
            oracle.truncate(5);
            assert_eq!(got.len(), oracle.len());
            for (g, o) in got.iter().zip(&oracle) {
                assert_eq!(g.score.to_bits(), o.score.to_bits());
                assert_eq!(g.insertion_tick, o.insertion_tick);
            }
            // Scores descend and every entry is in the buffer.
            for w in got.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
            for g in &got {
                assert!(buf.entries().iter().any(|e| e.seq == g.seq));
            }
        }
    }

    #[test]
    fn exploration_weight_cases() {
        let w_min = 0.2;
        let delta = 0.5;
        assert_eq!(exploration_weight(&[1.0, 1.0], &[], delta, w_min), 1.0);
        let b = vec![entry(1.0, 0, 0)]; // state [1.0, 0.0]
        assert_eq!(exploration_weight(&[1.0, 0.0], &b, delta, w_min), w_min);
        // Distance 1.5 * delta: no deprioritization.
        assert_eq!(exploration_weight(&[1.0, 0.75], &b, delta, w_min), 1.0);
    }

    #[test]
    fn buffer_snapshot_roundtrips() {
        let mut buf = SharedBuffer::new(4, 50, 2);
        buf.insert(entry(1.5, 1, 7));
        let json = buf.snapshot_json().unwrap();
        let back: SharedBuffer = serde_json::from_str(&json).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.entries()[0].score, 1.5);
        assert_eq!(back.capacity, 4);
    }
}
