//! Dual-segment sliding-window KV cache.
//!
//! The system segment (initial prompt) is never evicted. The streaming
//! segment holds interleaved user/assistant tokens; when the window budget
//! would be exceeded, the oldest 20% of the streaming segment is dropped
//! and the survivors are re-based with a reverse-RoPE shift so their
//! effective position ids restart right after the system segment.

use crate::rope::{rope_shift_in_place, RopeFreqs};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("position {got} does not continue the segment (last position {last})")]
    PositionOrder { got: i64, last: i64 },
    #[error("system segment is sealed once streaming entries exist")]
    SealedSegment,
    #[error("chunk of {incoming} entries cannot fit: window {window}, system segment {system}")]
    Overflow {
        incoming: usize,
        window: usize,
        system: usize,
    },
    #[error("entry shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    System,
    Streaming,
}

/// One attention head-stacked key/value pair for a single layer.
/// Vectors have length `n_heads * d_head`; the key is RoPE-rotated
/// per head at the entry's position.
#[derive(Debug, Clone)]
pub struct KvPair {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

/// One cached token column: the same position across all layers.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub position: i64,
    pub layers: Vec<KvPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvictionReport {
    pub evicted_count: usize,
    pub delta: i64,
    pub new_first_position: i64,
}

#[derive(Debug, Serialize)]
pub struct CacheDump {
    pub window_budget: usize,
    pub system_len: usize,
    pub streaming_len: usize,
    pub system_positions: Option<(i64, i64)>,
    pub streaming_positions: Option<(i64, i64)>,
    pub eviction_history: Vec<EvictionReport>,
}

#[derive(Debug, Clone)]
pub struct DualCache {
    n_layers: usize,
    n_heads: usize,
    d_head: usize,
    window_budget: usize,
    eviction_fraction: f64,
    system: Vec<CacheEntry>,
    streaming: Vec<CacheEntry>,
    history: Vec<EvictionReport>,
}

impl DualCache {
    pub fn new(n_layers: usize, n_heads: usize, d_head: usize, window_budget: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_head,
            window_budget,
            eviction_fraction: 0.2,
            system: Vec::new(),
            streaming: Vec::new(),
            history: Vec::new(),
        }
    }

    /// Override the 20% eviction fraction (must be in (0, 1]).
    pub fn with_eviction_fraction(mut self, fraction: f64) -> Self {
        assert!(fraction > 0.0 && fraction <= 1.0);
        self.eviction_fraction = fraction;
        self
    }

    pub fn window_budget(&self) -> usize {
        self.window_budget
    }

    pub fn system_len(&self) -> usize {
        self.system.len()
    }

    pub fn streaming_len(&self) -> usize {
        self.streaming.len()
    }

    pub fn len(&self) -> usize {
        self.system.len() + self.streaming.len()
    }

    pub fn is_empty(&self) -> bool {
        self.system.is_empty() && self.streaming.is_empty()
    }

    pub fn eviction_history(&self) -> &[EvictionReport] {
        &self.history
    }

    /// All cached entries in position order: system segment then streaming.
    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.system.iter().chain(self.streaming.iter())
    }

    pub fn system_entries(&self) -> &[CacheEntry] {
        &self.system
    }

    pub fn streaming_entries(&self) -> &[CacheEntry] {
        &self.streaming
    }

    /// Position id for the next appended or decoded token.
    pub fn next_position(&self) -> i64 {
        self.streaming
            .last()
            .or(self.system.last())
            .map(|e| e.position + 1)
            .unwrap_or(0)
    }

    fn validate_entry(&self, e: &CacheEntry) -> Result<(), CacheError> {
        if e.layers.len() != self.n_layers {
            return Err(CacheError::ShapeMismatch(format!(
                "entry has {} layers, cache expects {}",
                e.layers.len(),
                self.n_layers
            )));
        }
        let width = self.n_heads * self.d_head;
        for kv in &e.layers {
            if kv.key.len() != width || kv.value.len() != width {
                return Err(CacheError::ShapeMismatch(format!(
                    "key/value width {}/{} does not match heads*d_head = {}",
                    kv.key.len(),
                    kv.value.len(),
                    width
                )));
            }
        }
        Ok(())
    }

    pub fn append(&mut self, entries: Vec<CacheEntry>, segment: Segment) -> Result<(), CacheError> {
        if segment == Segment::System && !self.streaming.is_empty() {
            return Err(CacheError::SealedSegment);
        }
        if self.len() + entries.len() > self.window_budget {
            return Err(CacheError::Overflow {
                incoming: entries.len(),
                window: self.window_budget,
                system: self.system.len(),
            });
        }
        // Streaming positions must also stay above the system segment.
        let mut last = match segment {
            Segment::System => self.system.last().map(|e| e.position),
            Segment::Streaming => self
                .streaming
                .last()
                .or(self.system.last())
                .map(|e| e.position),
        };
        for e in &entries {
            self.validate_entry(e)?;
            if let Some(l) = last {
                if e.position <= l {
                    return Err(CacheError::PositionOrder {
                        got: e.position,
                        last: l,
                    });
                }
            }
            last = Some(e.position);
        }
        match segment {
            Segment::System => self.system.extend(entries),
            Segment::Streaming => self.streaming.extend(entries),
        }
        Ok(())
    }

    /// Evict the oldest portion of the streaming segment if `incoming_len`
    /// more entries would exceed the window budget, repeating until the
    /// budget holds, then re-base surviving streaming keys and positions.
    pub fn maybe_evict(
        &mut self,
        incoming_len: usize,
        f: &RopeFreqs,
    ) -> Result<Option<EvictionReport>, CacheError> {
        if self.len() + incoming_len <= self.window_budget {
            return Ok(None);
        }
        debug_assert_eq!(f.dims(), self.d_head);
        let mut evicted = 0usize;
        while self.len() + incoming_len > self.window_budget && !self.streaming.is_empty() {
            let n = ((self.streaming.len() as f64) * self.eviction_fraction).ceil() as usize;
            let n = n.max(1).min(self.streaming.len());
            self.streaming.drain(..n);
            evicted += n;
        }
        if self.len() + incoming_len > self.window_budget {
            return Err(CacheError::Overflow {
                incoming: incoming_len,
                window: self.window_budget,
                system: self.system.len(),
            });
        }
        let base = self.system.last().map(|e| e.position + 1).unwrap_or(0);
        let delta = match self.streaming.first() {
            Some(first) => first.position - base,
            None => 0,
        };
        if delta > 0 {
            for e in &mut self.streaming {
                for kv in &mut e.layers {
                    for h in 0..self.n_heads {
                        let s = h * self.d_head;
                        rope_shift_in_place(&mut kv.key[s..s + self.d_head], delta as f64, f);
                    }
                }
                e.position -= delta;
            }
        }
        let report = EvictionReport {
            evicted_count: evicted,
            delta,
            new_first_position: base,
        };
        self.history.push(report);
        Ok(Some(report))
    }

    pub fn dump(&self) -> CacheDump {
        let range = |v: &[CacheEntry]| {
            v.first()
                .map(|a| (a.position, v.last().unwrap().position))
        };
        CacheDump {
            window_budget: self.window_budget,
            system_len: self.system.len(),
            streaming_len: self.streaming.len(),
            system_positions: range(&self.system),
            streaming_positions: range(&self.streaming),
            eviction_history: self.history.clone(),
        }
    }
}
