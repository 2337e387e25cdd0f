//! Data preprocessing: per-second caption splitting, label derivation,
//! clip segmentation, and response-rate stratification.

use crate::losses::{LabelTimeline, LossError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("ASR segment has non-positive span: start {start}, end {end}")]
    InvalidSpan { start: f64, end: f64 },
    #[error("ASR segment has empty text")]
    EmptyText,
    #[error("caption at second {second} beyond horizon {horizon}")]
    OutOfRange { second: u64, horizon: u64 },
    #[error("clip_len {clip_len} must exceed overlap {overlap}")]
    InvalidClipParams { clip_len: u64, overlap: u64 },
    #[error(transparent)]
    Label(#[from] LossError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsrSegment {
    pub start: f64,
    pub end: f64,
    pub text: String,
    pub speaker: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSecondCaption {
    pub second: u64,
    pub words: Vec<String>,
    pub continues: bool,
}

impl PerSecondCaption {
    /// Rendered caption; continuing seconds carry the trailing " ..." suffix.
    pub fn render(&self) -> String {
        let body = self.words.join(" ");
        if self.continues {
            if body.is_empty() {
                "...".to_string()
            } else {
                format!("{body} ...")
            }
        } else {
            body
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipSpec {
    pub start_s: u64,
    pub end_s: u64,
    pub response_rate: f64,
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Distribute the segment's words over its (rounded) one-second bins as
/// evenly as possible: with q = floor(n/t), r = n - t*q, the first r
/// seconds take q+1 words and the rest q. All but the last second are
/// marked continuing.
pub fn split_caption(seg: &AsrSegment) -> Result<Vec<PerSecondCaption>, DataError> {
    if seg.end <= seg.start {
        return Err(DataError::InvalidSpan {
            start: seg.start,
            end: seg.end,
        });
    }
    let words: Vec<String> = seg.text.split_whitespace().map(str::to_string).collect();
    if words.is_empty() {
        return Err(DataError::EmptyText);
    }
    let start = round_half_up(seg.start).max(0) as u64;
    let end = round_half_up(seg.end).max(0) as u64;
    let mut t = end.saturating_sub(start);
    if t == 0 {
        log::debug!(
            "segment [{}, {}] rounds to zero seconds; clamping to 1",
            seg.start,
            seg.end
        );
        t = 1;
    }
    let n = words.len() as u64;
    let q = n / t;
    let r = n - t * q;
    let mut out = Vec::with_capacity(t as usize);
    let mut cursor = 0usize;
    for s in 0..t {
        let take = if s < r { q + 1 } else { q } as usize;
        out.push(PerSecondCaption {
            second: start + s,
            words: words[cursor..cursor + take].to_vec(),
            continues: s + 1 < t,
        });
        cursor += take;
    }
    debug_assert_eq!(cursor, words.len());
    Ok(out)
}

/// y_t = 1 iff a non-empty caption exists at second t.
pub fn derive_labels(
    captions: &[PerSecondCaption],
    horizon: u64,
) -> Result<LabelTimeline, DataError> {
    let mut y = vec![0u8; horizon as usize];
    for c in captions {
        if c.second >= horizon {
            return Err(DataError::OutOfRange {
                second: c.second,
                horizon,
            });
        }
        if !c.words.is_empty() {
            y[c.second as usize] = 1;
        }
    }
    Ok(LabelTimeline::new(y)?)
}

/// Fixed-length clips with stride `clip_len - overlap`; the final partial
/// clip is dropped. Response rates are filled in by the caller.
pub fn segment_clips(
    video_len_s: u64,
    clip_len: u64,
    overlap: u64,
) -> Result<Vec<ClipSpec>, DataError> {
    if clip_len <= overlap {
        return Err(DataError::InvalidClipParams { clip_len, overlap });
    }
    let stride = clip_len - overlap;
    let mut clips = Vec::new();
    let mut start = 0u64;
    while start + clip_len <= video_len_s {
        clips.push(ClipSpec {
            start_s: start,
            end_s: start + clip_len,
            response_rate: 0.0,
        });
        start += stride;
    }
    Ok(clips)
}

/// Per-bin quotas for response-rate stratification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StratifyQuotas {
    pub low: usize,
    pub mid: usize,
    pub high: usize,
}

impl Default for StratifyQuotas {
    fn default() -> Self {
        // 60 / 120 / 60 per game.
        Self {
            low: 60,
            mid: 120,
            high: 60,
        }
    }
}

/// Sample without replacement from response-rate bins [0,0.3), [0.3,0.7),
/// [0.7,1.0]. Short bins contribute everything they have, with a log line.
pub fn stratify(clips: &[ClipSpec], quotas: &StratifyQuotas, seed: u64) -> Vec<ClipSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bins: [Vec<&ClipSpec>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for c in clips {
        let idx = if c.response_rate < 0.3 {
            0
        } else if c.response_rate < 0.7 {
            1
        } else {
            2
        };
        bins[idx].push(c);
    }
    let mut out = Vec::new();
    for (bin, quota) in bins.iter_mut().zip([quotas.low, quotas.mid, quotas.high]) {
        if bin.len() < quota {
            log::warn!(
                "stratify: bin has only {} clips for quota {}",
                bin.len(),
                quota
            );
        }
        bin.shuffle(&mut rng);
        out.extend(bin.iter().take(quota).map(|c| (*c).clone()));
    }
    out
}
