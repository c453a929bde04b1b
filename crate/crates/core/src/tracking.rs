//! Bright/dark isotope fingerprints along the chain: pattern loading,
//! window uniqueness, collision events and mismatch detection.
//!
//! Observation frames are anchored: `frame.start` is the index, in the true
//! chain, of the first observed ion. Detection compares the observed sites
//! with the believed ledger at the same indices and, on a difference,
//! searches all single loss/reorder events for the best explanation.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("position {position} out of range for a chain of {len}")]
    OutOfRange { position: usize, len: usize },
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("dark fraction {0} outside [0, 1)")]
    InvalidFraction(f64),
    #[error("window of {window} sites is shorter than the uniqueness length {required}")]
    Ambiguous { window: usize, required: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid ledger: {0}")]
    InvalidLedger(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Site {
    Bright,
    Dark,
}

impl Site {
    pub fn symbol(self) -> char {
        match self {
            Site::Bright => 'B',
            Site::Dark => 'D',
        }
    }

    fn flipped(self) -> Self {
        match self {
            Site::Bright => Site::Dark,
            Site::Dark => Site::Bright,
        }
    }
}

/// `B`/`D` string.
pub fn pattern_to_text(pattern: &[Site]) -> String {
    pattern.iter().map(|s| s.symbol()).collect()
}

pub fn parse_pattern(text: &str) -> Result<Vec<Site>, TrackingError> {
    text.trim()
        .chars()
        .enumerate()
        .map(|(i, c)| match c {
            'B' | 'b' => Ok(Site::Bright),
            'D' | 'd' => Ok(Site::Dark),
            _ => Err(TrackingError::Parse { line: 1, message: format!("unexpected '{c}' at column {}", i + 1) }),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QubitLedger {
    pattern: Vec<Site>,
    labels: Vec<Option<u64>>,
    generation: u64,
    orphaned: Vec<u64>,
    next_label: u64,
}

impl QubitLedger {
    /// Labels 0, 1, … assigned to the bright positions in order.
    pub fn from_pattern(pattern: Vec<Site>) -> Self {
        let mut next = 0;
        let labels = pattern
            .iter()
            .map(|s| match s {
                Site::Bright => {
                    next += 1;
                    Some(next - 1)
                }
                Site::Dark => None,
            })
            .collect();
        Self { pattern, labels, generation: 0, orphaned: Vec::new(), next_label: next }
    }

    pub fn pattern(&self) -> &[Site] {
        &self.pattern
    }

    pub fn labels(&self) -> &[Option<u64>] {
        &self.labels
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Labels whose ions were lost.
    pub fn orphaned(&self) -> &[u64] {
        &self.orphaned
    }

    pub fn len(&self) -> usize {
        self.pattern.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pattern.is_empty()
    }

    pub fn dark_count(&self) -> usize {
        self.pattern.iter().filter(|s| **s == Site::Dark).count()
    }

    pub fn position_of(&self, label: u64) -> Option<usize> {
        self.labels.iter().position(|l| *l == Some(label))
    }

    /// Labels of the ions at positions [start, start+len), wrapping if asked.
    pub fn window_labels(&self, start: usize, len: usize, circular: bool) -> BTreeSet<u64> {
        window_indices(self.len(), start, len, circular).filter_map(|i| self.labels[i]).collect()
    }

    pub fn validate(&self) -> Result<(), TrackingError> {
        if self.labels.len() != self.pattern.len() {
            return Err(TrackingError::InvalidLedger("label and pattern lengths differ".into()));
        }
        let mut seen = HashSet::new();
        for (s, l) in self.pattern.iter().zip(&self.labels) {
            match (s, l) {
                (Site::Bright, Some(l)) => {
                    if !seen.insert(*l) || *l >= self.next_label {
                        return Err(TrackingError::InvalidLedger(format!("label {l} repeated or unissued")));
                    }
                }
                (Site::Dark, None) => {}
                _ => return Err(TrackingError::InvalidLedger("labels must sit exactly on bright sites".into())),
            }
        }
        Ok(())
    }

    /// New ledger after one collision event.
    pub fn apply_event(&self, event: &CollisionEvent) -> Result<QubitLedger, TrackingError> {
        event.check(self.len())?;
        let mut out = self.clone();
        match event.kind {
            EventKind::Loss { position } => {
                out.pattern.remove(position);
                if let Some(l) = out.labels.remove(position) {
                    out.orphaned.push(l);
                }
            }
            EventKind::Reorder { a, b } => {
                out.pattern.swap(a, b);
                out.labels.swap(a, b);
            }
        }
        Ok(out)
    }

    pub fn replay(&self, events: &[CollisionEvent]) -> Result<QubitLedger, TrackingError> {
        events.iter().try_fold(self.clone(), |l, e| l.apply_event(e))
    }

    /// Fresh labels for the given set; increments the generation.
    pub fn reencode(&self, affected: &BTreeSet<u64>) -> QubitLedger {
        let mut out = self.clone();
        for l in out.labels.iter_mut().flatten() {
            if affected.contains(l) {
                *l = out.next_label;
                out.next_label += 1;
            }
        }
        out.generation += 1;
        out
    }

    /// What a detector at `start` sees, with optional per-site flip noise.
    pub fn observe(&self, start: usize, len: usize, circular: bool, timestamp: f64) -> ObservationFrame {
        let sites = window_indices(self.len(), start, len, circular).map(|i| self.pattern[i]).collect();
        ObservationFrame { start, length: len, sites, timestamp, circular }
    }

    pub fn observe_noisy(
        &self,
        start: usize,
        len: usize,
        circular: bool,
        timestamp: f64,
        flip_probability: f64,
        seed: u64,
    ) -> ObservationFrame {
        let mut frame = self.observe(start, len, circular, timestamp);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut frame.sites {
            if rng.random::<f64>() < flip_probability {
                *s = s.flipped();
            }
        }
        frame
    }
}

fn window_indices(n: usize, start: usize, len: usize, circular: bool) -> impl Iterator<Item = usize> {
    let take = if circular || n == 0 { len.min(n) } else { len.min(n.saturating_sub(start)) };
    (0..take).map(move |k| if circular { (start + k) % n } else { start + k })
}

/// I.i.d. Bernoulli(dark_fraction) pattern, deterministic per seed.
pub fn load_pattern(n_ions: usize, dark_fraction: f64, seed: u64) -> Result<QubitLedger, TrackingError> {
    if !(0.0..1.0).contains(&dark_fraction) {
        return Err(TrackingError::InvalidFraction(dark_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = (0..n_ions)
        .map(|_| if rng.random::<f64>() < dark_fraction { Site::Dark } else { Site::Bright })
        .collect();
    Ok(QubitLedger::from_pattern(pattern))
}

fn windows_distinct(pattern: &[Site], len: usize, circular: bool) -> bool {
    let n = pattern.len();
    let mut seen = HashSet::new();
    if circular {
        let doubled: Vec<Site> = pattern.iter().chain(pattern.iter()).copied().collect();
        (0..n).all(|i| seen.insert(&doubled[i..i + len]))
    } else {
        pattern.windows(len).all(|w| seen.insert(w))
    }
}

/// Smallest L whose windows are pairwise distinct: over the N−L+1 linear
/// windows with L < N, or the N rotations with L ≤ N when `circular`.
/// `None` when no such L exists (uniform or periodic patterns).
pub fn min_unique_window(pattern: &[Site], circular: bool) -> Option<usize> {
    let n = pattern.len();
    let max = if circular { n } else { n.saturating_sub(1) };
    if max == 0 {
        return None;
    }
    // distinctness is monotone in L: double until it holds, then bisect
    let mut lo = 1;
    let mut hi = 1;
    while !windows_distinct(pattern, hi, circular) {
        if hi == max {
            return None;
        }
        lo = hi + 1;
        hi = (2 * hi).min(max);
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if windows_distinct(pattern, mid, circular) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(lo)
}

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSweep {
    pub n_ions: usize,
    pub dark_fraction: f64,
    pub lengths: Vec<Option<usize>>,
    pub median: Option<f64>,
    /// log₂N / H(p)
    pub entropy_floor: f64,
}

/// Uniqueness length over `trials` random patterns with seeds
/// `first_seed..first_seed+trials`.
pub fn window_sweep(n_ions: usize, dark_fraction: f64, first_seed: u64, trials: usize) -> Result<WindowSweep, TrackingError> {
    let lengths = (0..trials as u64)
        .map(|k| load_pattern(n_ions, dark_fraction, first_seed + k).map(|l| min_unique_window(l.pattern(), false)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut found: Vec<usize> = lengths.iter().flatten().copied().collect();
    found.sort_unstable();
    let median = match found.len() {
        0 => None,
        m if m % 2 == 1 => Some(found[m / 2] as f64),
        m => Some(0.5 * (found[m / 2 - 1] + found[m / 2]) as f64),
    };
    Ok(WindowSweep {
        n_ions,
        dark_fraction,
        lengths,
        median,
        entropy_floor: (n_ions as f64).log2() / binary_entropy(dark_fraction),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Loss { position: usize },
    Reorder { a: usize, b: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub kind: EventKind,
    /// s
    pub time: f64,
}

impl CollisionEvent {
    pub fn loss(position: usize, time: f64) -> Self {
        Self { kind: EventKind::Loss { position }, time }
    }

    pub fn reorder(a: usize, b: usize, time: f64) -> Self {
        Self { kind: EventKind::Reorder { a, b }, time }
    }

    fn check(&self, len: usize) -> Result<(), TrackingError> {
        let in_range = |p: usize| if p < len { Ok(()) } else { Err(TrackingError::OutOfRange { position: p, len }) };
        match self.kind {
            EventKind::Loss { position } => in_range(position),
            EventKind::Reorder { a, b } => {
                in_range(a)?;
                in_range(b)?;
                if a == b {
                    return Err(TrackingError::InvalidEvent("reorder positions must differ".into()));
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for CollisionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            EventKind::Loss { position } => write!(f, "loss {position} @ {:e}", self.time),
            EventKind::Reorder { a, b } => write!(f, "reorder {a} {b} @ {:e}", self.time),
        }
    }
}

impl FromStr for CollisionEvent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (body, time) = s.split_once('@').ok_or("missing '@ <time>'")?;
        let time: f64 = time.trim().parse().map_err(|e| format!("bad time: {e}"))?;
        let words: Vec<&str> = body.split_whitespace().collect();
        let num = |w: &str| w.parse::<usize>().map_err(|e| format!("bad position '{w}': {e}"));
        match words.as_slice() {
            ["loss", p] => Ok(Self::loss(num(p)?, time)),
            ["reorder", a, b] => Ok(Self::reorder(num(a)?, num(b)?, time)),
            _ => Err(format!("expected 'loss <pos>' or 'reorder <p> <q>', got '{}'", body.trim())),
        }
    }
}

/// Event log text, one event per line:
///
/// ```text
/// loss <position> @ <time_s>
/// reorder <position> <position> @ <time_s>
/// ```
///
/// Blank lines and lines starting with `#` are ignored.
pub fn parse_event_log(text: &str) -> Result<Vec<CollisionEvent>, TrackingError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| l.parse().map_err(|message| TrackingError::Parse { line: i + 1, message }))
        .collect()
}

pub fn write_event_log(events: &[CollisionEvent]) -> String {
    events.iter().map(|e| format!("{e}\n")).collect()
}

/// Random valid event sequence: Poisson arrivals at `rate`, each a loss
/// with probability `loss_fraction`, otherwise an adjacent reorder.
pub fn sample_events(
    initial_len: usize,
    count: usize,
    rate: f64,
    loss_fraction: f64,
    seed: u64,
) -> Result<Vec<CollisionEvent>, TrackingError> {
    if !(rate > 0.0) || !(0.0..=1.0).contains(&loss_fraction) {
        return Err(TrackingError::InvalidEvent("rate must be positive and loss fraction in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(rate).map_err(|e| TrackingError::InvalidEvent(e.to_string()))?;
    let mut len = initial_len;
    let mut t = 0.0;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        t += gap.sample(&mut rng);
        let loss = len < 2 || rng.random::<f64>() < loss_fraction;
        if len == 0 {
            break;
        }
        if loss {
            out.push(CollisionEvent::loss(rng.random_range(0..len), t));
            len -= 1;
        } else {
            let a = rng.random_range(0..len - 1);
            out.push(CollisionEvent::reorder(a, a + 1, t));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    /// Index of the first observed ion in the true chain.
    pub start: usize,
    /// Sites the detector covers; `sites` is shorter when the chain ends
    /// inside the window.
    pub length: usize,
    pub sites: Vec<Site>,
    /// s
    pub timestamp: f64,
    pub circular: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchKind {
    Loss,
    Reorder,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Detection {
    Consistent,
    Mismatch {
        kind: MismatchKind,
        /// Best-scoring single events, all tied.
        hypotheses: Vec<EventKind>,
        /// Labels to reset and re-encode.
        affected: BTreeSet<u64>,
    },
}

impl Detection {
    pub fn is_consistent(&self) -> bool {
        matches!(self, Detection::Consistent)
    }
}

/// Site predicted at true index `i` after a hypothetical event.
fn predicted(believed: &[Site], event: EventKind, i: usize) -> Site {
    match event {
        EventKind::Loss { position } => believed[if i < position { i } else { i + 1 }],
        EventKind::Reorder { a, b } => believed[if i == a {
            b
        } else if i == b {
            a
        } else {
            i
        }],
    }
}

fn score(believed: &[Site], event: Option<EventKind>, frame: &ObservationFrame, window: usize) -> usize {
    let n = match event {
        Some(EventKind::Loss { .. }) => believed.len() - 1,
        _ => believed.len(),
    };
    let idx: Vec<usize> = window_indices(n, frame.start, window, frame.circular).collect();
    let mut s = idx.len().abs_diff(frame.sites.len());
    for (k, &i) in idx.iter().enumerate() {
        let Some(obs) = frame.sites.get(k) else { break };
        let p = match event {
            Some(e) => predicted(believed, e, i),
            None => believed[i],
        };
        s += usize::from(p != *obs);
    }
    s
}

fn event_labels(ledger: &QubitLedger, event: EventKind) -> BTreeSet<u64> {
    let positions = match event {
        EventKind::Loss { position } => vec![position],
        EventKind::Reorder { a, b } => vec![a, b],
    };
    positions.into_iter().filter_map(|p| ledger.labels[p]).collect()
}

/// Compare an observed window with the believed chain. On a difference
/// every single loss or reorder that can touch the window is scored by
/// Hamming distance (plus any length difference). A unique best kind with
/// one label set is reported as such; ties between different label sets,
/// or no exact single-event explanation, give `Unknown` with every label
/// in the believed window.
pub fn detect_mismatch(believed: &QubitLedger, frame: &ObservationFrame) -> Result<Detection, TrackingError> {
    let n = believed.len();
    if n == 0 {
        return Err(TrackingError::InvalidLedger("empty chain".into()));
    }
    if frame.start >= n {
        return Err(TrackingError::OutOfRange { position: frame.start, len: n });
    }
    let window = frame.length;
    if frame.sites.len() > window {
        return Err(TrackingError::InvalidEvent("frame holds more sites than its length".into()));
    }
    if let Some(required) = min_unique_window(&believed.pattern, frame.circular) {
        if window < required {
            return Err(TrackingError::Ambiguous { window, required });
        }
    }
    if score(&believed.pattern, None, frame, window) == 0 {
        return Ok(Detection::Consistent);
    }
    let window_set: HashSet<usize> = window_indices(n, frame.start, window, frame.circular).collect();
    let last = window_set.iter().copied().max().unwrap_or(0);
    let mut candidates: Vec<EventKind> = Vec::new();
    // with a wrapped window a loss anywhere shifts the indices
    let loss_limit = if frame.circular { n } else { (last + 2).min(n) };
    candidates.extend((0..loss_limit).map(|p| EventKind::Loss { position: p }));
    for &a in &window_set {
        for b in 0..n {
            if b != a && (!window_set.contains(&b) || a < b) {
                candidates.push(EventKind::Reorder { a: a.min(b), b: a.max(b) });
            }
        }
    }
    candidates.sort_unstable_by_key(|e| match *e {
        EventKind::Loss { position } => (0, position, 0),
        EventKind::Reorder { a, b } => (1, a, b),
    });
    candidates.dedup();
    let scored: Vec<(usize, EventKind)> = candidates
        .into_iter()
        .map(|e| (score(&believed.pattern, Some(e), frame, window), e))
        .collect();
    let best = scored.iter().map(|(s, _)| *s).min().unwrap_or(usize::MAX);
    let whole = believed.window_labels(frame.start, window, frame.circular);
    if best > 0 {
        return Ok(Detection::Mismatch { kind: MismatchKind::Unknown, hypotheses: Vec::new(), affected: whole });
    }
    let tied: Vec<EventKind> = scored.into_iter().filter(|(s, _)| *s == 0).map(|(_, e)| e).collect();
    let first = event_labels(believed, tied[0]);
    let same_kind = tied.iter().all(|e| std::mem::discriminant(e) == std::mem::discriminant(&tied[0]));
    let same_labels = tied.iter().all(|e| event_labels(believed, *e) == first);
    if same_kind && same_labels {
        let kind = match tied[0] {
            EventKind::Loss { .. } => MismatchKind::Loss,
            EventKind::Reorder { .. } => MismatchKind::Reorder,
        };
        Ok(Detection::Mismatch { kind, hypotheses: tied, affected: first })
    } else {
        Ok(Detection::Mismatch { kind: MismatchKind::Unknown, hypotheses: tied, affected: whole })
    }
}
