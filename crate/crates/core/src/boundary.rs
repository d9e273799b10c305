//! Boundary indicators and the counter-based structural prior.
//!
//! `m_t = 1` marks the last step of a subsequence, so step `t + 1` starts a
//! new one. The step before the sequence is treated as a boundary, which
//! makes step 0 the start of the first subsequence.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryLimits {
    /// `N_max`: maximum number of subsequences.
    pub max_segments: usize,
    /// `l_max`: maximum subsequence length.
    pub max_len: usize,
}

impl BoundaryLimits {
    pub fn new(max_segments: usize, max_len: usize) -> Self {
        Self { max_segments, max_len }
    }
}

/// Outcome of the counter checks for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Forcing {
    Free,
    /// Segment budget exhausted: `p(m_t = 1) = 0`.
    Copy,
    /// Current subsequence at maximum length: `p(m_t = 1) = 1`.
    Boundary,
}

impl Forcing {
    pub fn check(segments: usize, len: usize, limits: BoundaryLimits) -> Self {
        if segments >= limits.max_segments {
            Forcing::Copy
        } else if len >= limits.max_len {
            Forcing::Boundary
        } else {
            Forcing::Free
        }
    }

    pub fn value(self) -> Option<bool> {
        match self {
            Forcing::Free => None,
            Forcing::Copy => Some(false),
            Forcing::Boundary => Some(true),
        }
    }
}

/// `p(m_t = 1 | s_t)` given the network probability and the current counters.
pub fn prior_probability(free_prob: f64, segments: usize, len: usize, limits: BoundaryLimits) -> f64 {
    match Forcing::check(segments, len, limits) {
        Forcing::Copy => 0.0,
        Forcing::Boundary => 1.0,
        Forcing::Free => free_prob,
    }
}

/// A sampled indicator sequence together with the running counters.
///
/// `count_subseq[t]` is `n(m_<t)`, the number of subsequences started up to
/// and including step `t`; `count_len[t]` is `l(m_<t)`, the length of the
/// current subsequence counting step `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryTrack {
    indicators: Vec<u8>,
    count_subseq: Vec<usize>,
    count_len: Vec<usize>,
    forced: Vec<bool>,
    limits: BoundaryLimits,
}

impl BoundaryTrack {
    pub fn new(limits: BoundaryLimits) -> Self {
        Self { indicators: Vec::new(), count_subseq: Vec::new(), count_len: Vec::new(), forced: Vec::new(), limits }
    }

    /// Counters `(n, l)` for the next step to be pushed.
    pub fn next_counters(&self) -> (usize, usize) {
        match self.indicators.last() {
            None => (1, 1),
            Some(&m) => {
                let t = self.indicators.len() - 1;
                if m == 1 {
                    (self.count_subseq[t] + 1, 1)
                } else {
                    (self.count_subseq[t], self.count_len[t] + 1)
                }
            }
        }
    }

    pub fn next_forcing(&self) -> Forcing {
        let (n, l) = self.next_counters();
        Forcing::check(n, l, self.limits)
    }

    /// Appends a proposed indicator, overriding it where the counters force a
    /// value. Returns the stored value.
    pub fn push(&mut self, proposed: bool) -> bool {
        let (n, l) = self.next_counters();
        let forcing = Forcing::check(n, l, self.limits);
        let value = forcing.value().unwrap_or(proposed);
        self.indicators.push(value as u8);
        self.count_subseq.push(n);
        self.count_len.push(l);
        self.forced.push(forcing != Forcing::Free);
        value
    }

    pub fn from_proposals(proposals: impl IntoIterator<Item = bool>, limits: BoundaryLimits) -> Self {
        let mut track = Self::new(limits);
        for p in proposals {
            track.push(p);
        }
        track
    }

    /// Builds a track from fixed indicators, rejecting any that contradict
    /// the counter forcing.
    pub fn from_indicators(indicators: &[u8], limits: BoundaryLimits) -> Result<Self> {
        let mut track = Self::new(limits);
        for (t, &m) in indicators.iter().enumerate() {
            if m > 1 {
                return Err(Error::InvalidArgument(format!("indicator {m} at step {t} is not binary")));
            }
            if track.push(m == 1) != (m == 1) {
                return Err(Error::InvalidArgument(format!("indicator at step {t} contradicts the counter limits")));
            }
        }
        Ok(track)
    }

    pub fn len(&self) -> usize {
        self.indicators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indicators.is_empty()
    }

    pub fn limits(&self) -> BoundaryLimits {
        self.limits
    }

    pub fn indicators(&self) -> &[u8] {
        &self.indicators
    }

    pub fn count_subseq(&self) -> &[usize] {
        &self.count_subseq
    }

    pub fn count_len(&self) -> &[usize] {
        &self.count_len
    }

    pub fn forced(&self) -> &[bool] {
        &self.forced
    }

    /// Whether step `t` performs an UPDATE (first step or previous boundary).
    pub fn is_update(&self, t: usize) -> bool {
        t == 0 || self.indicators[t - 1] == 1
    }

    /// Steps at which a subsequence starts, excluding step 0.
    pub fn segment_starts(&self) -> Vec<usize> {
        (1..self.len()).filter(|&t| self.indicators[t - 1] == 1).collect()
    }

    pub fn num_segments(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            1 + self.segment_starts().len()
        }
    }

    pub fn segment_lengths(&self) -> Vec<usize> {
        let mut starts = vec![0];
        starts.extend(self.segment_starts());
        starts.push(self.len());
        starts.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Checks the counter invariants against the limits.
    pub fn respects_limits(&self) -> bool {
        self.count_subseq.iter().all(|&n| n <= self.limits.max_segments)
            && self
                .count_len
                .iter()
                .zip(&self.count_subseq)
                .all(|(&l, &n)| l <= self.limits.max_len || n >= self.limits.max_segments)
    }
}
