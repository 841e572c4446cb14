//! Directed interaction events and pattern-tagged histories.
//!
//! An [`EventSequence`] is the raw data: timestamped directed events
//! `(t, src, dst)` on `V` nodes over an observation window `[0, T]`,
//! sorted by time with ties kept in input order. A
//! [`DirectedPairHistory`] reorganizes a sequence per ordered node pair
//! and attaches to every event its pattern weights: either a one-hot tag
//! sampled by the event-level Gibbs sampler (or recorded by the
//! simulator), or the soft responsibilities produced by EM. Intensity and
//! likelihood evaluation read histories in this form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub src: u32,
    pub dst: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EventSequence {
    events: Vec<Event>,
    horizon: f64,
    node_count: u32,
}

impl EventSequence {
    /// Validates and wraps an already time-sorted event list.
    pub fn new(events: Vec<Event>, horizon: f64, node_count: u32) -> Result<Self> {
        if !horizon.is_finite() || horizon < 0.0 {
            return Err(Error::data(format!(
                "horizon must be finite and non-negative, got {horizon}"
            )));
        }
        let mut prev = 0.0f64;
        for (i, e) in events.iter().enumerate() {
            if !e.t.is_finite() || e.t < 0.0 || e.t > horizon {
                return Err(Error::data(format!(
                    "event {i} at t={} lies outside the window [0, {horizon}]",
                    e.t
                )));
            }
            if e.t < prev {
                return Err(Error::data(format!(
                    "events are not sorted: event {i} at t={} follows t={prev}",
                    e.t
                )));
            }
            if e.src == e.dst {
                return Err(Error::data(format!(
                    "event {i} is a self-loop on node {}",
                    e.src
                )));
            }
            if e.src >= node_count || e.dst >= node_count {
                return Err(Error::data(format!(
                    "event {i} references node {} but the sequence has {node_count} nodes",
                    e.src.max(e.dst)
                )));
            }
            prev = e.t;
        }
        Ok(EventSequence {
            events,
            horizon,
            node_count,
        })
    }

    /// Stable-sorts by time, then validates. Ties keep input order.
    pub fn from_unsorted(mut events: Vec<Event>, horizon: f64, node_count: u32) -> Result<Self> {
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Self::new(events, horizon, node_count)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn node_count(&self) -> u32 {
        self.node_count
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Splits into the first `n` events and the rest. The head keeps its
    /// own window `[0, t_n]` where `t_n` is the time of its last event;
    /// the tail keeps the original horizon.
    pub fn split_at_count(&self, n: usize) -> Result<(EventSequence, EventSequence)> {
        if n == 0 || n > self.events.len() {
            return Err(Error::data(format!(
                "cannot split {} events at position {n}",
                self.events.len()
            )));
        }
        let head: Vec<Event> = self.events[..n].to_vec();
        let tail: Vec<Event> = self.events[n..].to_vec();
        let t_split = head.last().map(|e| e.t).unwrap_or(0.0);
        let head = EventSequence::new(head, t_split, self.node_count)?;
        let tail = EventSequence::new(tail, self.horizon, self.node_count)?;
        Ok((head, tail))
    }

    /// Restricts to the first `n` events with an explicit window `[0, horizon]`.
    pub fn prefix(&self, n: usize, horizon: f64) -> Result<EventSequence> {
        if n > self.events.len() {
            return Err(Error::data(format!(
                "prefix of {n} events requested from a sequence of {}",
                self.events.len()
            )));
        }
        EventSequence::new(self.events[..n].to_vec(), horizon, self.node_count)
    }

    /// Event indices grouped by unordered node pair, in time order within
    /// each group. Opposite directions of the same pair interact through
    /// excitation, so they must be swept together; distinct unordered
    /// pairs are independent given the parameters.
    pub fn unordered_pair_groups(&self) -> BTreeMap<(u32, u32), Vec<usize>> {
        let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
        for (i, e) in self.events.iter().enumerate() {
            let key = if e.src < e.dst {
                (e.src, e.dst)
            } else {
                (e.dst, e.src)
            };
            groups.entry(key).or_default().push(i);
        }
        groups
    }
}

/// Latent structure attached to a sequence: for each event, whether it was
/// exogenous and which pattern `(k, k')` it carries. `Hard` holds one
/// sampled tag per event; `Soft` holds, flattened per event, the combined
/// responsibilities over the `K·K` patterns (each event's block sums to 1).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum LatentAssignment {
    Hard {
        exogenous: Vec<bool>,
        patterns: Vec<(u16, u16)>,
    },
    Soft {
        k: usize,
        weights: Vec<f64>,
    },
}

pub const SOFT_WEIGHT_TOL: f64 = 1e-10;

impl LatentAssignment {
    pub fn len(&self) -> usize {
        match self {
            LatentAssignment::Hard { exogenous, .. } => exogenous.len(),
            LatentAssignment::Soft { k, weights } => {
                if *k == 0 {
                    0
                } else {
                    weights.len() / (k * k)
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, n_events: usize, k: usize) -> Result<()> {
        match self {
            LatentAssignment::Hard {
                exogenous,
                patterns,
            } => {
                if exogenous.len() != n_events || patterns.len() != n_events {
                    return Err(Error::data(format!(
                        "assignment covers {} events but the sequence has {n_events}",
                        exogenous.len().max(patterns.len())
                    )));
                }
                for (i, &(a, b)) in patterns.iter().enumerate() {
                    if a as usize >= k || b as usize >= k {
                        return Err(Error::data(format!(
                            "event {i} carries pattern ({a}, {b}) but K={k}"
                        )));
                    }
                }
            }
            LatentAssignment::Soft { k: ka, weights } => {
                if *ka != k {
                    return Err(Error::data(format!(
                        "assignment has K={ka} but the model has K={k}"
                    )));
                }
                if weights.len() != n_events * k * k {
                    return Err(Error::data(format!(
                        "soft assignment holds {} weights, expected {}",
                        weights.len(),
                        n_events * k * k
                    )));
                }
                for i in 0..n_events {
                    let block = &weights[i * k * k..(i + 1) * k * k];
                    let s: f64 = block.iter().sum();
                    if (s - 1.0).abs() > SOFT_WEIGHT_TOL || block.iter().any(|w| *w < 0.0) {
                        return Err(Error::data(format!(
                            "soft weights of event {i} sum to {s}, expected 1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the event's pattern weights into `buf` (length `k·k`,
    /// row-major over `(k, k')`).
    pub fn weights_into(&self, idx: usize, k: usize, buf: &mut [f64]) {
        debug_assert_eq!(buf.len(), k * k);
        match self {
            LatentAssignment::Hard { patterns, .. } => {
                buf.fill(0.0);
                let (a, b) = patterns[idx];
                buf[a as usize * k + b as usize] = 1.0;
            }
            LatentAssignment::Soft { weights, .. } => {
                buf.copy_from_slice(&weights[idx * k * k..(idx + 1) * k * k]);
            }
        }
    }
}

/// Events of one directed pair in time order, with per-event pattern
/// weights flattened as `weights[j·K² + a·K + b]` for the event `j` of the
/// pair carrying pattern `(a, b)` mass.
#[derive(Clone, Debug, Default)]
pub struct TaggedEvents {
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
}

/// A sequence reorganized per ordered node pair with pattern weights.
#[derive(Clone, Debug)]
pub struct DirectedPairHistory {
    k: usize,
    pairs: BTreeMap<(u32, u32), TaggedEvents>,
}

impl DirectedPairHistory {
    /// Builds the tagged history for a sequence. `assignment = None` is
    /// only meaningful for a single-pattern model (`k = 1`), where every
    /// event trivially carries full weight on the one pattern.
    pub fn build(
        seq: &EventSequence,
        k: usize,
        assignment: Option<&LatentAssignment>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::domain("pattern count must be positive".to_string()));
        }
        match assignment {
            Some(a) => a.validate(seq.len(), k)?,
            None => {
                if k > 1 {
                    return Err(Error::domain(
                        "an assignment is required when the model has more than one pattern"
                            .to_string(),
                    ));
                }
            }
        }
        let kk = k * k;
        let mut pairs: BTreeMap<(u32, u32), TaggedEvents> = BTreeMap::new();
        let mut buf = vec![0.0; kk];
        for (i, e) in seq.events().iter().enumerate() {
            match assignment {
                Some(a) => a.weights_into(i, k, &mut buf),
                None => buf[0] = 1.0,
            }
            let entry = pairs.entry((e.src, e.dst)).or_default();
            entry.times.push(e.t);
            entry.weights.extend_from_slice(&buf);
        }
        Ok(DirectedPairHistory { k, pairs })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn pair(&self, src: u32, dst: u32) -> Option<&TaggedEvents> {
        self.pairs.get(&(src, dst))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&(u32, u32), &TaggedEvents)> {
        self.pairs.iter()
    }

    /// Number of tagged events across all pairs.
    pub fn total_events(&self) -> usize {
        self.pairs.values().map(|p| p.times.len()).sum()
    }

    /// Keeps only events strictly before `t` (frozen history for
    /// prediction).
    pub fn truncated(&self, t: f64) -> Self {
        let kk = self.k * self.k;
        let mut pairs = BTreeMap::new();
        for (key, ev) in &self.pairs {
            let n = ev.times.partition_point(|&tj| tj < t);
            if n > 0 {
                pairs.insert(
                    *key,
                    TaggedEvents {
                        times: ev.times[..n].to_vec(),
                        weights: ev.weights[..n * kk].to_vec(),
                    },
                );
            }
        }
        DirectedPairHistory { k: self.k, pairs }
    }
}
