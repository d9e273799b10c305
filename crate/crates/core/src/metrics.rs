//! Boundary precision, recall and F1 against ground-truth event steps.
//!
//! A predicted subsequence start at step `p` may be matched to an event at
//! step `e` when `|p - e| <= window`; every prediction and event is used at
//! most once, and the number of matches is maximised.

use rand::seq::index::sample;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MatchCounts {
    pub matched: usize,
    pub predicted: usize,
    pub events: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.matched += other.matched;
        self.predicted += other.predicted;
        self.events += other.events;
    }

    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.matched as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.events == 0 {
            0.0
        } else {
            self.matched as f64 / self.events as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Maximum matching between sorted `predicted` and `events` steps.
///
/// Each event can only reach predictions in a window of fixed width, so
/// scanning events in order and taking the earliest reachable unused
/// prediction is optimal.
pub fn match_boundaries(predicted: &[usize], events: &[usize], window: usize) -> MatchCounts {
    let mut preds = predicted.to_vec();
    preds.sort_unstable();
    let mut evs = events.to_vec();
    evs.sort_unstable();
    let mut used = vec![false; preds.len()];
    let mut matched = 0;
    let mut start = 0;
    for &e in &evs {
        while start < preds.len() && preds[start] + window < e {
            start += 1;
        }
        if let Some(k) = (start..preds.len()).take_while(|&k| preds[k] <= e + window).find(|&k| !used[k]) {
            used[k] = true;
            matched += 1;
        }
    }
    MatchCounts { matched, predicted: preds.len(), events: evs.len() }
}

/// Exhaustive maximum bipartite matching; exponential, for testing only.
pub fn match_boundaries_brute_force(predicted: &[usize], events: &[usize], window: usize) -> MatchCounts {
    fn best(k: usize, predicted: &[usize], events: &[usize], used: &mut Vec<bool>, window: usize) -> usize {
        if k == events.len() {
            return 0;
        }
        let mut top = best(k + 1, predicted, events, used, window);
        for j in 0..predicted.len() {
            if !used[j] && predicted[j].abs_diff(events[k]) <= window {
                used[j] = true;
                top = top.max(1 + best(k + 1, predicted, events, used, window));
                used[j] = false;
            }
        }
        top
    }
    let mut used = vec![false; predicted.len()];
    MatchCounts {
        matched: best(0, predicted, events, &mut used, window),
        predicted: predicted.len(),
        events: events.len(),
    }
}

/// Steps whose flag is set.
pub fn event_steps(flags: &[u8]) -> Vec<usize> {
    flags.iter().enumerate().filter(|(_, &f)| f != 0).map(|(t, _)| t).collect()
}

/// Random boundaries with the same count per sequence: `count` distinct
/// steps drawn uniformly from `1..len`.
pub fn random_starts<R: Rng>(count: usize, len: usize, rng: &mut R) -> Vec<usize> {
    if len <= 1 {
        return Vec::new();
    }
    let mut s: Vec<usize> = sample(rng, len - 1, count.min(len - 1)).into_iter().map(|k| k + 1).collect();
    s.sort_unstable();
    s
}

/// One-sided paired t-test of `mean(a - b) > 0`. Returns `(mean
/// difference, t statistic, p-value)`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Option<(f64, f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        let p = if mean > 0.0 { 0.0 } else { 1.0 };
        let t = if mean > 0.0 { f64::INFINITY } else if mean < 0.0 { f64::NEG_INFINITY } else { 0.0 };
        return Some((mean, t, p));
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).ok()?;
    Some((mean, t, 1.0 - dist.cdf(t)))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn simple_cases() {
        let m = match_boundaries(&[2, 5, 9], &[3, 5, 15], 1);
        assert_eq!(m, MatchCounts { matched: 2, predicted: 3, events: 3 });
        assert!((m.f1() - 2.0 / 3.0).abs() < 1e-12);
        // one prediction cannot serve two events
        assert_eq!(match_boundaries(&[4], &[3, 5], 1).matched, 1);
        // greedy must not steal the only partner of a later event
        assert_eq!(match_boundaries(&[3, 4], &[3, 5], 1).matched, 2);
        assert_eq!(MatchCounts::default().f1(), 0.0);
    }

    #[test]
    fn paired_test_against_reference_values() {
        // differences 1, 2, 3, 4, 5: mean 3, sd sqrt(2.5), t = 3 / sqrt(0.5) = 4.2426
        let a = [2.0, 4.0, 6.0, 8.0, 10.0];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (mean, t, p) = paired_t_test(&a, &b).unwrap();
        assert_eq!(mean, 3.0);
        assert!((t - 4.242640687).abs() < 1e-8);
        // upper tail of Student's t with 4 degrees of freedom at 4.2426
        assert!((p - 0.0066).abs() < 2e-4, "{p}");
        let (_, _, p_rev) = paired_t_test(&b, &a).unwrap();
        assert!(p_rev > 0.99);
        assert_eq!(paired_t_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap().2, 1.0);
    }

    #[test]
    fn every_step_marked_gives_full_recall() {
        let events = [3, 7, 12];
        let all: Vec<usize> = (1..20).collect();
        assert_eq!(match_boundaries(&all, &events, 1).recall(), 1.0);
    }

    proptest! {
        #[test]
        fn greedy_matches_brute_force(
            p in proptest::collection::btree_set(1usize..20, 0..7),
            e in proptest::collection::btree_set(1usize..20, 0..7),
        ) {
            let p: Vec<usize> = p.into_iter().collect();
            let e: Vec<usize> = e.into_iter().collect();
            prop_assert_eq!(match_boundaries(&p, &e, 1), match_boundaries_brute_force(&p, &e, 1));
        }

        #[test]
        fn random_starts_are_distinct_and_in_range(count in 0usize..30, len in 0usize..25, seed in any::<u64>()) {
            use rand::SeedableRng;
            let s = random_starts(count, len, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.iter().all(|&t| t >= 1 && t < len.max(1)));
            prop_assert_eq!(s.len(), count.min(len.saturating_sub(1)));
        }
    }
}
